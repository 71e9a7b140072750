//! Procedural captioned shape scenes used as the inpainting corpus.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffusion::codec::{IMAGE_CHANNELS, IMAGE_SIDE};
use crate::imageio;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }

    /// Whether the pixel centred at box-relative `(u, v)` in `(0, 1)^2` is
    /// inside the shape. `v` grows downward.
    fn covers(self, u: f32, v: f32) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => du * du + dv * dv <= 0.25,
            ShapeKind::Triangle => du.abs() <= v / 2.0,
            ShapeKind::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        }
    }
}

pub const MIN_SHAPE: usize = 4;
pub const MAX_SHAPE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeScene {
    pub background: Color,
    pub kind: ShapeKind,
    pub color: Color,
    /// Top-left corner of the square bounding box.
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl ShapeScene {
    pub fn random(rng: &mut impl Rng) -> Self {
        let background = Color::ALL[rng.gen_range(0..4)];
        let others: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != background).collect();
        let color = others[rng.gen_range(0..others.len())];
        let kind = ShapeKind::ALL[rng.gen_range(0..4)];
        let size = rng.gen_range(MIN_SHAPE..=MAX_SHAPE);
        let x = rng.gen_range(0..=IMAGE_SIDE - size);
        let y = rng.gen_range(0..=IMAGE_SIDE - size);
        Self {
            background,
            kind,
            color,
            x,
            y,
            size,
        }
    }

    pub fn in_box(&self, px: usize, py: usize) -> bool {
        (self.x..self.x + self.size).contains(&px) && (self.y..self.y + self.size).contains(&py)
    }
}

/// Rasterise: background fill, then hard-edged shape pixels.
pub fn render(scene: &ShapeScene) -> Result<Tensor<f32>> {
    if scene.size == 0 || scene.x + scene.size > IMAGE_SIDE || scene.y + scene.size > IMAGE_SIDE {
        return Err(Error::Config(format!(
            "shape box at ({}, {}) of size {} leaves the {IMAGE_SIDE}x{IMAGE_SIDE} image",
            scene.x, scene.y, scene.size
        )));
    }
    let (bg, fg) = (scene.background.rgb(), scene.color.rgb());
    let s = scene.size as f32;
    Ok(Tensor::from_fn([IMAGE_SIDE, IMAGE_SIDE, IMAGE_CHANNELS], |i| {
        let c = i % IMAGE_CHANNELS;
        let px = (i / IMAGE_CHANNELS) % IMAGE_SIDE;
        let py = i / (IMAGE_CHANNELS * IMAGE_SIDE);
        let inside = scene.in_box(px, py) && {
            let u = (px - scene.x) as f32 / s + 0.5 / s;
            let v = (py - scene.y) as f32 / s + 0.5 / s;
            scene.kind.covers(u, v)
        };
        if inside {
            fg[c]
        } else {
            bg[c]
        }
    }))
}

/// Keep mask: 0 over the bounding box, 1 elsewhere.
pub fn box_mask(scene: &ShapeScene) -> Tensor<f32> {
    Tensor::from_fn([IMAGE_SIDE, IMAGE_SIDE], |i| {
        if scene.in_box(i % IMAGE_SIDE, i / IMAGE_SIDE) {
            0.0
        } else {
            1.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedExample {
    pub seed: u64,
    pub scene: ShapeScene,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    /// "a <color> <shape> on <bg> background"
    pub prompt_full: String,
    /// "a <color> <shape>"
    pub prompt_mask: String,
}

impl CaptionedExample {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scene = ShapeScene::random(&mut rng);
        Self::from_scene(seed, scene)
    }

    pub fn from_scene(seed: u64, scene: ShapeScene) -> Self {
        let image = render(&scene).expect("generated scenes are in bounds");
        let prompt_mask = format!("a {} {}", scene.color.word(), scene.kind.word());
        let prompt_full = format!("{prompt_mask} on {} background", scene.background.word());
        Self {
            seed,
            scene,
            image,
            mask: box_mask(&scene),
            prompt_full,
            prompt_mask,
        }
    }
}

/// Seed offsets of the corpus splits. Example seeds never overlap.
pub const TRAIN_SEED_BASE: u64 = 0;
pub const TEST_SEED_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn seed(self, index: u64) -> u64 {
        match self {
            Split::Train => TRAIN_SEED_BASE + index,
            Split::Test => TEST_SEED_BASE + index,
        }
    }
}

/// `n` examples with seeds `seed, seed + 1, ...`.
pub fn generate(seed: u64, n: usize) -> Vec<CaptionedExample> {
    (0..n as u64).map(|i| CaptionedExample::from_seed(seed + i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub file: String,
    pub mask: String,
    pub prompt_full: String,
    pub prompt_mask: String,
    pub seed: u64,
}

/// Write PPM/PGM pairs plus `index.json` into `dir`. Returns written paths.
pub fn export_corpus(examples: &[CaptionedExample], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(examples.len());
    let mut written = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let file = format!("{i:05}_image.ppm");
        let mask = format!("{i:05}_mask.pgm");
        imageio::write_ppm(dir.join(&file), &ex.image)?;
        imageio::write_pgm(dir.join(&mask), &ex.mask)?;
        written.push(dir.join(&file));
        written.push(dir.join(&mask));
        index.push(CorpusEntry {
            file,
            mask,
            prompt_full: ex.prompt_full.clone(),
            prompt_mask: ex.prompt_mask.clone(),
            seed: ex.seed,
        });
    }
    let idx = dir.join("index.json");
    std::fs::write(&idx, serde_json::to_string_pretty(&index)?)?;
    written.push(idx);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pixel(img: &Tensor<f32>, x: usize, y: usize) -> [f32; 3] {
        let i = (y * IMAGE_SIDE + x) * 3;
        [img.data()[i], img.data()[i + 1], img.data()[i + 2]]
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(7, 2), generate(7, 2));
        assert_ne!(generate(7, 2), generate(8, 2));
    }

    #[test]
    fn all_classes_appear_in_a_thousand() {
        let seen: HashSet<_> = generate(TRAIN_SEED_BASE, 1000)
            .iter()
            .map(|e| (e.scene.kind, e.scene.color))
            .collect();
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn mask_zeros_cover_box_exactly() {
        for ex in generate(123, 50) {
            for y in 0..16 {
                for x in 0..16 {
                    let keep = ex.mask.data()[y * 16 + x] == 1.0;
                    assert_eq!(keep, !ex.scene.in_box(x, y));
                }
            }
            // Everything outside the box is background.
            for y in 0..16 {
                for x in 0..16 {
                    if !ex.scene.in_box(x, y) {
                        assert_eq!(pixel(&ex.image, x, y), ex.scene.background.rgb());
                    }
                }
            }
        }
    }

    #[test]
    fn prompts_fit_without_truncation() {
        let v = crate::text::Vocabulary::default();
        for ex in generate(5, 40) {
            assert_eq!(v.tokenize(&ex.prompt_mask, 8).unwrap().prompt_len, 3);
            assert_eq!(v.tokenize(&ex.prompt_full, 8).unwrap().prompt_len, 6);
            assert_ne!(ex.scene.color, ex.scene.background);
        }
    }

    #[test]
    fn full_square_is_uniform() {
        let scene = ShapeScene {
            background: Color::Blue,
            kind: ShapeKind::Square,
            color: Color::Red,
            x: 0,
            y: 0,
            size: 16,
        };
        let img = render(&scene).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(pixel(&img, x, y), [1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn centred_circle_is_rotation_symmetric() {
        let scene = ShapeScene {
            background: Color::Green,
            kind: ShapeKind::Circle,
            color: Color::Yellow,
            x: 6,
            y: 6,
            size: 4,
        };
        let img = render(&scene).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(pixel(&img, x, y), pixel(&img, 15 - y, x));
            }
        }
    }

    #[test]
    fn triangle_is_smaller_than_its_box() {
        for size in MIN_SHAPE..=MAX_SHAPE {
            let scene = ShapeScene {
                background: Color::Green,
                kind: ShapeKind::Triangle,
                color: Color::Red,
                x: 0,
                y: 0,
                size,
            };
            let img = render(&scene).unwrap();
            let count = (0..256).filter(|&i| img.data()[i * 3] == 1.0).count();
            assert!(count > 0 && count < size * size);
        }
    }

    #[test]
    fn pixels_take_only_two_colours() {
        for ex in generate(77, 20) {
            let (bg, fg) = (ex.scene.background.rgb(), ex.scene.color.rgb());
            for y in 0..16 {
                for x in 0..16 {
                    let p = pixel(&ex.image, x, y);
                    assert!(p == bg || p == fg);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let scene = ShapeScene {
            background: Color::Green,
            kind: ShapeKind::Square,
            color: Color::Red,
            x: 10,
            y: 0,
            size: 8,
        };
        assert!(render(&scene).is_err());
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let train: HashSet<u64> = (0..5000).map(|i| Split::Train.seed(i)).collect();
        assert!((0..5000).all(|i| !train.contains(&Split::Test.seed(i))));
    }

    #[test]
    fn kinds_pass_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut counts = [0f64; 4];
        for ex in generate(TRAIN_SEED_BASE, 2000) {
            counts[ShapeKind::ALL.iter().position(|&k| k == ex.scene.kind).unwrap()] += 1.0;
        }
        let expect = 500.0;
        let stat: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
        let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
        assert!(stat < critical, "chi2 {stat} >= {critical}");
    }

    #[test]
    fn export_writes_index() {
        let dir = tempfile::tempdir().unwrap();
        let ex = generate(1, 3);
        let files = export_corpus(&ex, dir.path()).unwrap();
        assert_eq!(files.len(), 7);
        let idx: Vec<CorpusEntry> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
        assert_eq!(idx[2].seed, 3);
        assert_eq!(idx[2].prompt_mask, ex[2].prompt_mask);
        let img = imageio::read_ppm(dir.path().join(&idx[1].file)).unwrap();
        assert_eq!(img, ex[1].image);
    }
}
