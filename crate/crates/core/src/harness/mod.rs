//! Experiment orchestration shared by the `decoy` binary, the C bindings
//! and the acceptance suite: configuration with dot-path overrides, run
//! directories with manifests, and the measure-and-compare pipeline.

mod commands;
mod run;
mod sweep;

pub use commands::{execute, Command, Outcome};
pub use run::{peak_rss_kb, RunDir, RunManifest};
pub use sweep::{run_sweep, SweepAxis, SweepResult, SweepRow, SweepSpec, SweepValue};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::{protect, AdversarialNoise, AttackConfig};
use crate::data::{CaptionedExample, Split};
use crate::diffusion::sampler::{sample_inpaint, InpaintOutput, SampleOptions, SamplerConfig};
use crate::eval::{attribute, mass_split, AttentionAttribution, MassSplit};
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_tnsr_file, Tensor};
use crate::diffusion::train::TrainConfig;
use crate::{imageio, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub split: Split,
    /// First example index within the split.
    pub start: u64,
    pub count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            start: 0,
            count: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Cross-attention resolutions averaged for attribution; `None` = all.
    pub layers: Option<Vec<usize>>,
    /// Sampler seeds each image is inpainted with.
    pub sampler_seeds: Vec<u64>,
    /// Inpainting prompt; defaults to each example's region caption.
    pub prompt: Option<String>,
    pub morph_kernel: usize,
    pub morph_iterations: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            layers: None,
            sampler_seeds: vec![0],
            prompt: None,
            morph_kernel: 5,
            morph_iterations: 2,
        }
    }
}

/// Explicit files that replace the generated test images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    /// Already-protected image (evaluate, render-delta).
    pub protected: Option<PathBuf>,
    /// Reference image for render-delta.
    pub original: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Names the run directory; the per-component seeds below drive RNGs.
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    /// Worker threads for independent images; 0 = all cores.
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub inputs: Inputs,
    pub sweep: Option<SweepSpec>,
}

/// Parse an override value: JSON if it parses, `a/b` as a fraction,
/// anything else as a string.
pub fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if let Some((a, b)) = raw.split_once('/') {
        if let (Ok(a), Ok(b)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            if b != 0.0 {
                if let Some(n) = serde_json::Number::from_f64(a / b) {
                    return Value::Number(n);
                }
            }
        }
    }
    Value::String(raw.to_string())
}

/// Recursively overlay `patch` onto `base`. Keys unknown to `base` are
/// rejected so typos surface as configuration errors.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(Error::Config(format!("unknown config key {sub}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, dotted: &str, v: Value) -> Result<()> {
    let mut patch = v;
    for key in dotted.rsplit('.') {
        if key.is_empty() {
            return Err(Error::Config(format!("bad override key {dotted:?}")));
        }
        let mut obj = serde_json::Map::new();
        obj.insert(key.to_string(), patch);
        patch = Value::Object(obj);
    }
    merge(root, patch, "")
}

impl RunConfig {
    /// Defaults, overlaid by the config file's JSON, then by `key=value`
    /// overrides. Returns the resolved config and its JSON echo.
    pub fn resolve(file: Option<&Value>, overrides: &[String]) -> Result<(Self, Value)> {
        let mut v = serde_json::to_value(RunConfig::default())?;
        if let Some(f) = file {
            if !f.is_object() {
                return Err(Error::Config("config file must hold a JSON object".into()));
            }
            merge(&mut v, f.clone(), "")?;
        }
        for o in overrides {
            let (k, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut v, k.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let echo = serde_json::to_value(&cfg)?;
        Ok((cfg, echo))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(Self, Value)> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Some(serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        Self::resolve(file.as_ref(), overrides)
    }

    pub fn thread_count(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn load_model(&self) -> Result<Model> {
        let dir = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("checkpoint path is required (set checkpoint=<dir>)".into()))?;
        Model::load(dir)
    }

    /// Images this run operates on.
    pub fn subjects(&self) -> Result<Vec<Subject>> {
        if let Some(img) = &self.inputs.image {
            let mask = self
                .inputs
                .mask
                .as_ref()
                .ok_or_else(|| Error::Config("inputs.mask is required with inputs.image".into()))?;
            let prompt = self
                .eval
                .prompt
                .clone()
                .ok_or_else(|| Error::Config("eval.prompt is required with inputs.image".into()))?;
            return Ok(vec![Subject {
                id: "input".into(),
                seed: None,
                image: read_image(img)?,
                mask: imageio::read_mask(mask)?,
                prompt,
            }]);
        }
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be positive".into()));
        }
        Ok((0..self.data.count as u64)
            .map(|i| {
                let index = self.data.start + i;
                let ex = CaptionedExample::from_seed(self.data.split.seed(index));
                Subject::from_example(&ex, self.data.split, index, self.eval.prompt.clone())
            })
            .collect())
    }
}

/// An image, its mask and the prompt it is inpainted with.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Dataset seed, when generated.
    pub seed: Option<u64>,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub prompt: String,
}

impl Subject {
    pub fn from_example(ex: &CaptionedExample, split: Split, index: u64, prompt: Option<String>) -> Self {
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        Self {
            id: format!("{tag}{index:05}"),
            seed: Some(ex.seed),
            image: ex.image.clone(),
            mask: ex.mask.clone(),
            prompt: prompt.unwrap_or_else(|| ex.prompt_mask.clone()),
        }
    }
}

/// PPM or TNSR image, by extension.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let t = match path.extension().and_then(|e| e.to_str()) {
        Some("tnsr") => read_tnsr_file(path)?,
        _ => imageio::read_ppm(path)?,
    };
    crate::diffusion::context::check_image(&t)?;
    Ok(t)
}

/// Result of one traced inpaint.
#[derive(Debug, Clone)]
pub struct Measured {
    pub output: InpaintOutput,
    pub attribution: AttentionAttribution,
    pub masses: MassSplit,
    pub forward_passes: u64,
}

/// Inpaint with tracing and measure class masses in the inpaint region.
pub fn measure(
    model: &Model,
    x: &Tensor<f32>,
    m: &Tensor<f32>,
    prompt: &str,
    sampler: &SamplerConfig,
    layers: Option<&[usize]>,
) -> Result<Measured> {
    let tokens = model.tokenize(prompt)?;
    let opts = SampleOptions {
        trace: true,
        force_uncond: false,
    };
    let output = sample_inpaint(model, x, m, &tokens, sampler, opts)?;
    let attribution = attribute(&output.traces, layers, tokens.prompt_len)?;
    let masses = mass_split(&attribution, &output.m_prime)?;
    let per_step = if sampler.cfg_scale != 0.0 { 2 } else { 1 };
    let forward_passes = per_step * output.timesteps.len() as u64;
    Ok(Measured {
        output,
        attribution,
        masses,
        forward_passes,
    })
}

/// Whether the mask leaves any latent position to inpaint.
pub fn has_inpaint_region(m: &Tensor<f32>) -> bool {
    crate::diffusion::context::downsample_mask(m).contains(&0.0)
}

pub fn protect_subject(model: &Model, s: &Subject, cfg: &AttackConfig) -> Result<AdversarialNoise> {
    protect(model, &s.image, &s.mask, cfg)
}

/// Map `f` over `items` on up to `threads` workers, keeping input order.
pub fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item visited")).collect()
}

/// Fixed 6-decimal formatting for CSV cells.
pub use crate::eval::fmt6;
