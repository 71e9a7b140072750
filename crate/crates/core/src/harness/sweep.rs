use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{has_inpaint_region, measure, par_map, parse_value, protect_subject, RunConfig, Subject};
use crate::attack::{AdversarialNoise, AttackConfig};
use crate::diffusion::sampler::SamplerConfig;
use crate::eval::{fmt6, morph, psnr, robustness_transform, MorphMode, Robustness};
use crate::model::Model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CfgScale,
    Epsilon,
    InferenceSteps,
    Strength,
    LayerSelection,
    MaskMorph,
    Robustness,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::CfgScale => "cfg_scale",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::InferenceSteps => "inference_steps",
            SweepAxis::Strength => "strength",
            SweepAxis::LayerSelection => "layer_selection",
            SweepAxis::MaskMorph => "mask_morph",
            SweepAxis::Robustness => "robustness",
        }
    }

    /// Axes whose values change the perturbation itself.
    pub fn reprotects(self) -> bool {
        matches!(self, SweepAxis::Epsilon | SweepAxis::LayerSelection)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepValue {
    CfgScale(f32),
    Epsilon(f32),
    InferenceSteps(usize),
    Strength(f32),
    Layers(Vec<usize>),
    /// `Dilate` of the keep mask shrinks the inpaint region.
    Morph(MorphMode),
    Robustness(Robustness),
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => parse_value(s).as_f64(),
        _ => None,
    }
}

fn parse_robustness(v: &Value) -> Option<Robustness> {
    if let Value::String(s) = v {
        let (kind, arg) = s.split_once(':')?;
        let arg: u32 = arg.trim().parse().ok()?;
        return match kind.trim().to_ascii_lowercase().as_str() {
            "quantize" => Some(Robustness::Quantize { levels: arg }),
            "boxblur" => Some(Robustness::BoxBlur { radius: arg as usize }),
            _ => None,
        };
    }
    serde_json::from_value(v.clone()).ok()
}

impl SweepValue {
    pub fn parse(axis: SweepAxis, v: &Value) -> Result<Self> {
        let bad = || Error::Config(format!("sweep value {v} does not fit axis {}", axis.name()));
        Ok(match axis {
            SweepAxis::CfgScale => SweepValue::CfgScale(number(v).ok_or_else(bad)? as f32),
            SweepAxis::Epsilon => SweepValue::Epsilon(number(v).ok_or_else(bad)? as f32),
            SweepAxis::Strength => SweepValue::Strength(number(v).ok_or_else(bad)? as f32),
            SweepAxis::InferenceSteps => {
                let n = number(v).ok_or_else(bad)?;
                if n.fract() != 0.0 || n < 1.0 {
                    return Err(bad());
                }
                SweepValue::InferenceSteps(n as usize)
            }
            SweepAxis::LayerSelection => SweepValue::Layers(serde_json::from_value(v.clone()).map_err(|_| bad())?),
            SweepAxis::MaskMorph => match v.as_str() {
                Some("shrink") => SweepValue::Morph(MorphMode::Dilate),
                Some("expand") => SweepValue::Morph(MorphMode::Erode),
                _ => return Err(bad()),
            },
            SweepAxis::Robustness => SweepValue::Robustness(parse_robustness(v).ok_or_else(bad)?),
        })
    }

    pub fn label(&self) -> String {
        match self {
            SweepValue::CfgScale(v) | SweepValue::Epsilon(v) | SweepValue::Strength(v) => fmt6(*v as f64),
            SweepValue::InferenceSteps(n) => n.to_string(),
            SweepValue::Layers(l) => l.iter().map(usize::to_string).collect::<Vec<_>>().join("+"),
            SweepValue::Morph(MorphMode::Dilate) => "shrink".into(),
            SweepValue::Morph(MorphMode::Erode) => "expand".into(),
            SweepValue::Robustness(Robustness::Quantize { levels }) => format!("quantize:{levels}"),
            SweepValue::Robustness(Robustness::BoxBlur { radius }) => format!("boxblur:{radius}"),
        }
    }

    fn attack(&self, base: &AttackConfig) -> AttackConfig {
        let mut a = base.clone();
        match self {
            SweepValue::Epsilon(e) => {
                a.epsilon = *e;
                a.step_size = a.step_size.min(*e);
            }
            SweepValue::Layers(l) => a.layers = l.clone(),
            _ => {}
        }
        a
    }

    fn sampler(&self, base: &SamplerConfig) -> SamplerConfig {
        let mut s = base.clone();
        match self {
            SweepValue::CfgScale(w) => s.cfg_scale = *w,
            SweepValue::InferenceSteps(n) => s.inference_steps = *n,
            SweepValue::Strength(v) => s.strength = *v,
            _ => {}
        }
        s
    }
}

impl SweepSpec {
    /// Parse and validate every value against the model before any run.
    pub fn values(&self, model: &Model, cfg: &RunConfig) -> Result<Vec<SweepValue>> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep.values is empty".into()));
        }
        let available: Vec<usize> = model.predictor.cross_attention_layers().iter().map(|l| l.resolution).collect();
        let train_steps = model.schedule().train_steps;
        self.values
            .iter()
            .map(|v| {
                let sv = SweepValue::parse(self.axis, v)?;
                sv.attack(&cfg.attack).validate(&available)?;
                sv.sampler(&cfg.sampler).validate(train_steps)?;
                if let SweepValue::Robustness(r) = &sv {
                    robustness_transform(&crate::tensor::Tensor::full([1, 1, 3], 0.5), *r)?;
                }
                Ok(sv)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value_index: usize,
    pub value: String,
    pub image_index: usize,
    pub image: String,
    pub seed: u64,
    pub content_mass_oracle: f32,
    pub content_mass_protected: f32,
    pub psnr_vs_oracle: f64,
    /// Forward passes spent producing this row's protected result
    /// (attack plus inpainting), a deterministic runtime proxy.
    pub forward_passes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
    pub rows: Vec<SweepRow>,
    pub protect_calls: u64,
    pub forward_passes: u64,
    pub excluded: Vec<String>,
    /// Perturbations computed for each image, in value order (one entry
    /// when the axis does not reprotect).
    pub noises: Vec<Vec<AdversarialNoise>>,
}

impl SweepResult {
    pub fn csv(&self) -> String {
        let mut s = String::new();
        if self.axis == SweepAxis::InferenceSteps {
            s.push_str("# toy step counts 10/25/50 stand in for 50/75/100 on the full-size model\n");
        }
        s.push_str(&format!(
            "{},image,seed,content_mass_oracle,content_mass_protected,psnr_vs_oracle,runtime_forward_passes\n",
            self.axis.name()
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.value,
                r.image,
                r.seed,
                fmt6(r.content_mass_oracle as f64),
                fmt6(r.content_mass_protected as f64),
                fmt6(r.psnr_vs_oracle),
                r.forward_passes
            ));
        }
        s
    }

    /// Mean `(oracle, protected)` content mass per value.
    pub fn means(&self) -> Vec<(f64, f64)> {
        (0..self.values.len())
            .map(|vi| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.value_index == vi).collect();
                let n = rows.len().max(1) as f64;
                (
                    rows.iter().map(|r| r.content_mass_oracle as f64).sum::<f64>() / n,
                    rows.iter().map(|r| r.content_mass_protected as f64).sum::<f64>() / n,
                )
            })
            .collect()
    }
}

struct SubjectOut {
    rows: Vec<SweepRow>,
    protect_calls: u64,
    passes: u64,
    excluded: Vec<String>,
    noises: Vec<AdversarialNoise>,
}

fn sweep_subject(model: &Model, cfg: &RunConfig, values: &[SweepValue], axis: SweepAxis, si: usize, s: &Subject) -> Result<SubjectOut> {
    let layers = cfg.eval.layers.as_deref();
    let seeds = &cfg.eval.sampler_seeds;
    let mut out = SubjectOut {
        rows: Vec::new(),
        protect_calls: 0,
        passes: 0,
        excluded: Vec::new(),
        noises: Vec::new(),
    };
    let seeded = |base: &SamplerConfig, seed: u64| SamplerConfig { seed, ..base.clone() };
    let shared = if axis.reprotects() {
        None
    } else {
        let n = protect_subject(model, s, &cfg.attack)?;
        out.protect_calls += 1;
        out.passes += n.forward_passes;
        Some(n)
    };
    if let Some(n) = &shared {
        out.noises.push(n.clone());
    }
    // Oracles that do not depend on the swept value, per seed.
    let mut fixed_oracle = Vec::new();
    if matches!(axis, SweepAxis::Epsilon | SweepAxis::LayerSelection | SweepAxis::Robustness) {
        for &seed in seeds {
            let o = measure(model, &s.image, &s.mask, &s.prompt, &seeded(&cfg.sampler, seed), layers)?;
            out.passes += o.forward_passes;
            fixed_oracle.push(o);
        }
    }

    for (vi, v) in values.iter().enumerate() {
        let noise = match &shared {
            Some(n) => n.clone(),
            None => {
                let n = protect_subject(model, s, &v.attack(&cfg.attack))?;
                out.protect_calls += 1;
                out.passes += n.forward_passes;
                out.noises.push(n.clone());
                n
            }
        };
        let mask = match v {
            SweepValue::Morph(mode) => morph(&s.mask, *mode, cfg.eval.morph_kernel, cfg.eval.morph_iterations)?,
            _ => s.mask.clone(),
        };
        if !has_inpaint_region(&mask) {
            out.excluded
                .push(format!("{} {}: mask leaves no inpaint region", s.id, v.label()));
            continue;
        }
        let mut protected = noise.protected(&s.image)?;
        if let SweepValue::Robustness(r) = v {
            protected = robustness_transform(&protected, *r)?;
        }
        let sampler = v.sampler(&cfg.sampler);
        for (k, &seed) in seeds.iter().enumerate() {
            let sc = seeded(&sampler, seed);
            let oracle = match fixed_oracle.get(k) {
                Some(o) => o.clone(),
                None => {
                    let o = measure(model, &s.image, &mask, &s.prompt, &sc, layers)?;
                    out.passes += o.forward_passes;
                    o
                }
            };
            let prot = measure(model, &protected, &mask, &s.prompt, &sc, layers)?;
            out.passes += prot.forward_passes;
            out.rows.push(SweepRow {
                value_index: vi,
                value: v.label(),
                image_index: si,
                image: s.id.clone(),
                seed,
                content_mass_oracle: oracle.masses.content,
                content_mass_protected: prot.masses.content,
                psnr_vs_oracle: psnr(&prot.output.image, &oracle.output.image)?,
                forward_passes: noise.forward_passes + prot.forward_passes,
            });
        }
    }
    Ok(out)
}

/// Run `cfg.sweep` over `cfg`'s images. Protection is computed once per
/// image for sampler, mask and robustness axes and once per value for
/// attack axes.
pub fn run_sweep(model: &Model, cfg: &RunConfig) -> Result<SweepResult> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep.axis and sweep.values are required".into()))?;
    if cfg.eval.sampler_seeds.is_empty() {
        return Err(Error::Config("eval.sampler_seeds is empty".into()));
    }
    let values = spec.values(model, cfg)?;
    let subjects: Vec<(usize, Subject)> = cfg.subjects()?.into_iter().enumerate().collect();
    let outs = par_map(cfg.thread_count(), &subjects, |(si, s)| {
        sweep_subject(model, cfg, &values, spec.axis, *si, s)
    })?;
    let mut res = SweepResult {
        axis: spec.axis,
        values,
        rows: Vec::new(),
        protect_calls: 0,
        forward_passes: 0,
        excluded: Vec::new(),
        noises: Vec::new(),
    };
    for o in outs {
        res.rows.extend(o.rows);
        res.protect_calls += o.protect_calls;
        res.forward_passes += o.passes;
        res.excluded.extend(o.excluded);
        res.noises.push(o.noises);
    }
    res.rows.sort_by_key(|r| (r.value_index, r.image_index, r.seed));
    Ok(res)
}
