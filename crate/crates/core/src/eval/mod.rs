//! Token attribution, suppression metrics, mask morphology and the
//! post-processing transforms used for robustness checks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::codec::{IMAGE_CHANNELS, IMAGE_SIDE, LATENT_SIDE, LATENT_TOKENS};
use crate::imageio;
use crate::predictor::AttentionTrace;
use crate::tensor::Tensor;
use crate::text::{token_class, TokenClass};
use crate::{Error, Result};

/// Per-token attention heatmaps on the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAttribution {
    /// `maps[j]` is `[8, 8]`: mass token `j` receives at each latent position.
    pub maps: Vec<Tensor<f32>>,
    pub prompt_len: usize,
}

impl AttentionAttribution {
    pub fn seq_len(&self) -> usize {
        self.maps.len()
    }

    /// Mass of every token at latent position `pos`.
    pub fn column(&self, pos: usize) -> Vec<f32> {
        self.maps.iter().map(|m| m.data()[pos]).collect()
    }
}

/// Average attention maps over `traces` and the layers whose resolution is
/// in `resolutions` (`None` selects every layer), upsampled to the latent
/// grid and renormalised per position.
pub fn attribute(traces: &[AttentionTrace], resolutions: Option<&[usize]>, prompt_len: usize) -> Result<AttentionAttribution> {
    if traces.is_empty() {
        return Err(Error::Config("attribution needs at least one trace".into()));
    }
    let n = traces[0]
        .layers
        .first()
        .map(|l| l.attn.shape()[1])
        .ok_or_else(|| Error::Shape("trace has no layers".into()))?;
    let mut acc = vec![0.0f64; n * LATENT_TOKENS];
    let mut count = 0usize;
    for tr in traces {
        for layer in &tr.layers {
            if resolutions.is_some_and(|r| !r.contains(&layer.id.resolution)) {
                continue;
            }
            let (rows, cols) = layer.attn.dims2()?;
            let side = (rows as f64).sqrt() as usize;
            if side * side != rows || side == 0 || LATENT_SIDE % side != 0 || cols != n {
                return Err(Error::Shape(format!("attention map {rows}x{cols} does not tile the latent grid")));
            }
            let f = LATENT_SIDE / side;
            for pos in 0..LATENT_TOKENS {
                let (y, x) = (pos / LATENT_SIDE, pos % LATENT_SIDE);
                let q = (y / f) * side + x / f;
                for (j, &a) in layer.attn.row(q).iter().enumerate() {
                    acc[j * LATENT_TOKENS + pos] += a as f64;
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config(format!("no traced layer matches resolutions {resolutions:?}")));
    }
    for pos in 0..LATENT_TOKENS {
        let total: f64 = (0..n).map(|j| acc[j * LATENT_TOKENS + pos]).sum();
        for j in 0..n {
            acc[j * LATENT_TOKENS + pos] /= total;
        }
    }
    let maps = (0..n)
        .map(|j| Tensor::from_fn([LATENT_SIDE, LATENT_SIDE], |p| acc[j * LATENT_TOKENS + p] as f32))
        .collect();
    Ok(AttentionAttribution { maps, prompt_len })
}

/// Mean over inpaint positions (`m' = 0`) of the summed mass of tokens in `class`.
pub fn attention_mass(attr: &AttentionAttribution, m_prime: &[f32], class: TokenClass) -> Result<f32> {
    if m_prime.len() != LATENT_TOKENS {
        return Err(Error::Shape(format!("latent mask has {} entries", m_prime.len())));
    }
    let positions: Vec<usize> = (0..LATENT_TOKENS).filter(|&p| m_prime[p] == 0.0).collect();
    if positions.is_empty() {
        return Err(Error::Config("mask selects no inpaint positions".into()));
    }
    let tokens: Vec<usize> = (0..attr.seq_len())
        .filter(|&j| token_class(j, attr.prompt_len) == class)
        .collect();
    let sum: f64 = positions
        .iter()
        .map(|&p| tokens.iter().map(|&j| attr.maps[j].data()[p] as f64).sum::<f64>())
        .sum();
    Ok((sum / positions.len() as f64) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassSplit {
    pub content: f32,
    pub bos: f32,
    pub eos: f32,
}

pub fn mass_split(attr: &AttentionAttribution, m_prime: &[f32]) -> Result<MassSplit> {
    Ok(MassSplit {
        content: attention_mass(attr, m_prime, TokenClass::Content)?,
        bos: attention_mass(attr, m_prime, TokenClass::Bos)?,
        eos: attention_mass(attr, m_prime, TokenClass::Eos)?,
    })
}

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.numel().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MorphMode {
    Erode,
    Dilate,
}

/// Square-window morphology on the keep field (1 = keep). Windows are
/// clipped at the border, so erosion and dilation are exact duals.
pub fn morph(m: &Tensor<f32>, mode: MorphMode, kernel: usize, iterations: usize) -> Result<Tensor<f32>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("morphology kernel must be odd and positive, got {kernel}")));
    }
    let (h, w) = m.dims2()?;
    let r = (kernel / 2) as isize;
    let mut cur = m.clone();
    for _ in 0..iterations {
        let src = cur.data().to_vec();
        cur = Tensor::from_fn([h, w], |i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let mut out = match mode {
                MorphMode::Erode => 1.0f32,
                MorphMode::Dilate => 0.0,
            };
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    let v = src[yy as usize * w + xx as usize];
                    out = match mode {
                        MorphMode::Erode => out.min(v),
                        MorphMode::Dilate => out.max(v),
                    };
                }
            }
            out
        });
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "kind")]
pub enum Robustness {
    Quantize { levels: u32 },
    BoxBlur { radius: usize },
}

/// Post-processing an attacker might apply before inpainting.
pub fn robustness_transform(x: &Tensor<f32>, kind: Robustness) -> Result<Tensor<f32>> {
    match kind {
        Robustness::Quantize { levels } => {
            if levels < 2 {
                return Err(Error::Config(format!("quantize levels must be >= 2, got {levels}")));
            }
            let q = (levels - 1) as f32;
            Ok(x.map(|v| (v * q).round() / q))
        }
        Robustness::BoxBlur { radius } => {
            if radius < 1 {
                return Err(Error::Config("box blur radius must be >= 1".into()));
            }
            if x.rank() != 3 {
                return Err(Error::Shape(format!("box blur expects HxWxC, got {:?}", x.shape())));
            }
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let r = radius as isize;
            let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
            let count = ((2 * r + 1) * (2 * r + 1)) as f32;
            Ok(Tensor::from_fn([h, w, c], |i| {
                let ch = i % c;
                let (y, xx) = ((i / c / w) as isize, (i / c % w) as isize);
                let mut s = 0.0f32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        s += x.data()[(clamp(y + dy, h) * w + clamp(xx + dx, w)) * c + ch];
                    }
                }
                s / count
            }))
        }
    }
}

/// Suppression metrics for one evaluated inpaint, compared with the oracle
/// (the inpaint of the unprotected image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub content_mass_inpaint: f32,
    pub bos_mass_inpaint: f32,
    pub eos_mass_inpaint: f32,
    pub oracle: MassSplit,
    pub psnr_vs_oracle: f64,
    pub mse_vs_oracle: f64,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn new(masses: MassSplit, oracle: MassSplit, image: &Tensor<f32>, oracle_image: &Tensor<f32>, config: serde_json::Value) -> Result<Self> {
        Ok(Self {
            content_mass_inpaint: masses.content,
            bos_mass_inpaint: masses.bos,
            eos_mass_inpaint: masses.eos,
            oracle,
            psnr_vs_oracle: psnr(image, oracle_image)?,
            mse_vs_oracle: mse(image, oracle_image)?,
            config,
        })
    }

    pub fn content_mass_delta(&self) -> f32 {
        self.content_mass_inpaint - self.oracle.content
    }

    pub const CSV_HEADER: &'static str = "content_mass_inpaint,bos_mass_inpaint,eos_mass_inpaint,content_mass_oracle,bos_mass_oracle,eos_mass_oracle,content_mass_delta,psnr_vs_oracle,mse_vs_oracle";

    pub fn csv_row(&self) -> String {
        [
            self.content_mass_inpaint as f64,
            self.bos_mass_inpaint as f64,
            self.eos_mass_inpaint as f64,
            self.oracle.content as f64,
            self.oracle.bos as f64,
            self.oracle.eos as f64,
            self.content_mass_delta() as f64,
            self.psnr_vs_oracle,
            self.mse_vs_oracle,
        ]
        .iter()
        .map(|&v| fmt6(v))
        .collect::<Vec<_>>()
        .join(",")
    }
}

/// Fixed 6-decimal CSV formatting; infinities print as `inf`.
pub fn fmt6(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Colour dominance inside the inpaint region: mean of the channels the
/// target colour switches on minus the mean of the channels it leaves off.
pub fn color_dominance(img: &Tensor<f32>, m: &Tensor<f32>, target: [f32; 3]) -> Result<f32> {
    if img.shape() != [IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS] || m.shape() != [IMAGE_SIDE, IMAGE_SIDE] {
        return Err(Error::Shape("colour dominance needs a 16x16x3 image and 16x16 mask".into()));
    }
    let (mut on, mut off, mut n_on, mut n_off) = (0.0f64, 0.0f64, 0usize, 0usize);
    for (p, &keep) in m.data().iter().enumerate() {
        if keep != 0.0 {
            continue;
        }
        for (c, &t) in target.iter().enumerate() {
            let v = img.data()[p * 3 + c] as f64;
            if t > 0.5 {
                on += v;
                n_on += 1;
            } else {
                off += v;
                n_off += 1;
            }
        }
    }
    if n_on == 0 || n_off == 0 {
        return Err(Error::Config("colour dominance needs a non-empty inpaint region and a two-sided colour".into()));
    }
    Ok((on / n_on as f64 - off / n_off as f64) as f32)
}

/// Write one PGM per token (scaled so its maximum is 255) and a CSV of raw
/// values. Returns the written paths.
pub fn export_heatmaps(attr: &AttentionAttribution, words: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut csv = String::from("token,word,y,x,mass\n");
    for (j, map) in attr.maps.iter().enumerate() {
        let max = map.data().iter().copied().fold(0.0f32, f32::max);
        let scaled = map.map(|v| if max > 0.0 { v / max } else { 0.0 });
        let path = dir.join(format!("token_{j:02}.pgm"));
        std::fs::write(&path, imageio::encode_pgm(&scaled))?;
        written.push(path);
        let word = words.get(j).map(String::as_str).unwrap_or("?");
        for (p, &v) in map.data().iter().enumerate() {
            csv.push_str(&format!(
                "{j},{word},{},{},{}\n",
                p / LATENT_SIDE,
                p % LATENT_SIDE,
                fmt6(v as f64)
            ));
        }
    }
    let path = dir.join("heatmaps.csv");
    std::fs::write(&path, csv)?;
    written.push(path);
    Ok(written)
}
