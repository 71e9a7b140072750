use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{measure, par_map, protect_subject, read_image, run_sweep, RunConfig, RunDir, RunManifest, Subject};
use crate::diffusion::sampler::{sample_inpaint, SampleOptions, SamplerConfig};
use crate::diffusion::train::train;
use crate::eval::{export_heatmaps, fmt6, MetricsReport};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    Protect,
    Inpaint,
    Attribute,
    Evaluate,
    Sweep,
    RenderDelta,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Protect => "protect",
            Command::Inpaint => "inpaint",
            Command::Attribute => "attribute",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::RenderDelta => "render-delta",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Command::Train,
            Command::Protect,
            Command::Inpaint,
            Command::Attribute,
            Command::Evaluate,
            Command::Sweep,
            Command::RenderDelta,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

/// What a finished command leaves behind.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// Lines for standard output, beyond the run directory.
    pub report: Vec<String>,
}

fn seeded(s: &SamplerConfig, seed: u64) -> SamplerConfig {
    SamplerConfig { seed, ..s.clone() }
}

fn sampler_seeds(cfg: &RunConfig) -> Result<&[u64]> {
    if cfg.eval.sampler_seeds.is_empty() {
        return Err(Error::Config("eval.sampler_seeds is empty".into()));
    }
    Ok(&cfg.eval.sampler_seeds)
}

fn start(cmd: Command, cfg: &RunConfig, echo: &Value, root: &Path, model: Option<&Model>, subjects: &[Subject]) -> Result<RunDir> {
    let mut run = RunDir::create(root, cmd.name(), cfg.seed, echo.clone())?;
    if let Some(m) = model {
        run.manifest.checkpoint_hash = Some(m.hash()?);
    }
    run.manifest.corpus_seeds = subjects.iter().filter_map(|s| s.seed).collect();
    Ok(run)
}

/// Run `cmd` and write its artifacts under a fresh directory in `root`.
pub fn execute(cmd: Command, cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    match cmd {
        Command::Train => cmd_train(cfg, echo, root),
        Command::RenderDelta => cmd_render_delta(cfg, echo, root),
        _ => {
            let model = cfg.load_model()?;
            match cmd {
                Command::Protect => cmd_protect(&model, cfg, echo, root),
                Command::Inpaint => cmd_inpaint(&model, cfg, echo, root),
                Command::Attribute => cmd_attribute(&model, cfg, echo, root),
                Command::Evaluate => cmd_evaluate(&model, cfg, echo, root),
                Command::Sweep => cmd_sweep(&model, cfg, echo, root),
                Command::Train | Command::RenderDelta => unreachable!(),
            }
        }
    }
}

fn finish(run: RunDir, report: Vec<String>) -> Result<Outcome> {
    let (dir, manifest) = run.finish()?;
    Ok(Outcome { dir, manifest, report })
}

fn cmd_train(cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    let mut model = Model::new(cfg.model.clone())?;
    let mut run = RunDir::create(root, "train", cfg.seed, echo.clone())?;
    let mut csv = String::from("step,loss,ema_loss\n");
    let report = train(&mut model, &cfg.train, |step, loss, ema| {
        csv.push_str(&format!("{step},{},{}\n", fmt6(loss as f64), fmt6(ema as f64)));
    })?;
    run.write("loss.csv", csv)?;
    let ckpt = run.path("checkpoint");
    let hash = model.save(&ckpt)?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walk(&ckpt)? {
        files.push(entry);
    }
    files.sort();
    run.adopt(&files);
    run.manifest.checkpoint_hash = Some(hash);
    let ema = report.ema_loss.unwrap_or(f32::NAN);
    finish(run, vec![format!("ema_loss={}", fmt6(ema as f64))])
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

fn cmd_protect(model: &Model, cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    let subjects = cfg.subjects()?;
    let mut run = start(Command::Protect, cfg, echo, root, Some(model), &subjects)?;
    let noises = par_map(cfg.thread_count(), &subjects, |s| protect_subject(model, s, &cfg.attack))?;
    let mut report = Vec::new();
    for (s, n) in subjects.iter().zip(&noises) {
        let protected = n.protected(&s.image)?;
        run.write_ppm(&format!("{}/original.ppm", s.id), &s.image)?;
        run.write_pgm(&format!("{}/mask.pgm", s.id), &s.mask)?;
        run.write_ppm(&format!("{}/protected.ppm", s.id), &protected)?;
        run.write_tnsr(&format!("{}/protected.tnsr", s.id), &protected)?;
        run.write_tnsr(&format!("{}/delta.tnsr", s.id), &n.delta)?;
        let mut loss = String::from("iteration,l_ca\n");
        for (i, l) in n.loss_history.iter().enumerate() {
            loss.push_str(&format!("{i},{}\n", fmt6(*l as f64)));
        }
        run.write(&format!("{}/loss.csv", s.id), loss)?;
        let mut probe = String::from("iteration,probe_l_ca\n");
        for (i, l) in &n.probe_history {
            probe.push_str(&format!("{i},{}\n", fmt6(*l as f64)));
        }
        run.write(&format!("{}/probe.csv", s.id), probe)?;
        run.write_json(&format!("{}/attack.json", s.id), n)?;
        run.manifest.protect_calls += 1;
        run.manifest.forward_passes += n.forward_passes;
        if let (Some(a), Some(b)) = (n.initial_probe(), n.final_probe()) {
            report.push(format!("{} probe_l_ca {} -> {}", s.id, fmt6(a as f64), fmt6(b as f64)));
        }
    }
    finish(run, report)
}

fn cmd_inpaint(model: &Model, cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    let subjects = cfg.subjects()?;
    let seeds = sampler_seeds(cfg)?;
    let mut run = start(Command::Inpaint, cfg, echo, root, Some(model), &subjects)?;
    let outs = par_map(cfg.thread_count(), &subjects, |s| {
        let tokens = model.tokenize(&s.prompt)?;
        seeds
            .iter()
            .map(|&seed| sample_inpaint(model, &s.image, &s.mask, &tokens, &seeded(&cfg.sampler, seed), SampleOptions::default()))
            .collect::<Result<Vec<_>>>()
    })?;
    for (s, outs) in subjects.iter().zip(outs) {
        for (&seed, o) in seeds.iter().zip(outs) {
            run.write_ppm(&format!("{}/inpaint_s{seed}.ppm", s.id), &o.image)?;
            run.write_tnsr(&format!("{}/inpaint_s{seed}.tnsr", s.id), &o.image)?;
            let per_step = if cfg.sampler.cfg_scale != 0.0 { 2 } else { 1 };
            run.manifest.forward_passes += per_step * o.timesteps.len() as u64;
        }
    }
    finish(run, Vec::new())
}

fn cmd_attribute(model: &Model, cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    let subjects = cfg.subjects()?;
    let seeds = sampler_seeds(cfg)?;
    let mut run = start(Command::Attribute, cfg, echo, root, Some(model), &subjects)?;
    let layers = cfg.eval.layers.as_deref();
    let outs = par_map(cfg.thread_count(), &subjects, |s| {
        seeds
            .iter()
            .map(|&seed| measure(model, &s.image, &s.mask, &s.prompt, &seeded(&cfg.sampler, seed), layers))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("image,seed,content_mass_inpaint,bos_mass_inpaint,eos_mass_inpaint\n");
    for (s, outs) in subjects.iter().zip(outs) {
        let tokens = model.tokenize(&s.prompt)?;
        let words: Vec<String> = tokens.ids.iter().map(|&i| model.vocab.word(i).to_string()).collect();
        for (&seed, m) in seeds.iter().zip(outs) {
            let dir = run.path(&format!("{}/s{seed}", s.id));
            let files = export_heatmaps(&m.attribution, &words, &dir)?;
            run.adopt(&files);
            run.write_ppm(&format!("{}/s{seed}/inpaint.ppm", s.id), &m.output.image)?;
            run.manifest.forward_passes += m.forward_passes;
            csv.push_str(&format!(
                "{},{seed},{},{},{}\n",
                s.id,
                fmt6(m.masses.content as f64),
                fmt6(m.masses.bos as f64),
                fmt6(m.masses.eos as f64)
            ));
        }
    }
    run.write("masses.csv", csv)?;
    finish(run, Vec::new())
}

fn cmd_evaluate(model: &Model, cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    let subjects = cfg.subjects()?;
    let seeds = sampler_seeds(cfg)?;
    let mut run = start(Command::Evaluate, cfg, echo, root, Some(model), &subjects)?;
    let given = cfg.inputs.protected.as_ref().map(|p| read_image(p)).transpose()?;
    if given.is_some() && subjects.len() != 1 {
        return Err(Error::Config("inputs.protected needs exactly one subject (set inputs.image)".into()));
    }
    let layers = cfg.eval.layers.as_deref();
    let echo_small = serde_json::json!({"attack": echo["attack"], "sampler": echo["sampler"], "eval": echo["eval"]});
    let outs = par_map(cfg.thread_count(), &subjects, |s| {
        let (protected, noise) = match &given {
            Some(p) => (p.clone(), None),
            None => {
                let n = protect_subject(model, s, &cfg.attack)?;
                (n.protected(&s.image)?, Some(n))
            }
        };
        let mut rows = Vec::new();
        for &seed in seeds {
            let sc = seeded(&cfg.sampler, seed);
            let oracle = measure(model, &s.image, &s.mask, &s.prompt, &sc, layers)?;
            let prot = measure(model, &protected, &s.mask, &s.prompt, &sc, layers)?;
            let report = MetricsReport::new(prot.masses, oracle.masses, &prot.output.image, &oracle.output.image, echo_small.clone())?;
            rows.push((seed, oracle, prot, report));
        }
        Ok((protected, noise, rows))
    })?;
    let mut csv = format!("image,seed,{}\n", MetricsReport::CSV_HEADER);
    let mut reports = Vec::new();
    for (s, (protected, noise, rows)) in subjects.iter().zip(outs) {
        run.write_tnsr(&format!("{}/protected.tnsr", s.id), &protected)?;
        if let Some(n) = &noise {
            run.manifest.protect_calls += 1;
            run.manifest.forward_passes += n.forward_passes;
        }
        for (seed, oracle, prot, report) in rows {
            run.write_ppm(&format!("{}/oracle_s{seed}.ppm", s.id), &oracle.output.image)?;
            run.write_ppm(&format!("{}/protected_s{seed}.ppm", s.id), &prot.output.image)?;
            run.manifest.forward_passes += oracle.forward_passes + prot.forward_passes;
            csv.push_str(&format!("{},{seed},{}\n", s.id, report.csv_row()));
            reports.push(serde_json::json!({"image": s.id, "seed": seed, "metrics": report}));
        }
    }
    run.write("metrics.csv", csv)?;
    run.write_json("metrics.json", &reports)?;
    finish(run, Vec::new())
}

fn cmd_sweep(model: &Model, cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    let subjects = cfg.subjects()?;
    let mut run = start(Command::Sweep, cfg, echo, root, Some(model), &subjects)?;
    let res = run_sweep(model, cfg)?;
    run.write("sweep.csv", res.csv())?;
    run.manifest.protect_calls = res.protect_calls;
    run.manifest.forward_passes = res.forward_passes;
    run.manifest.excluded = res.excluded.clone();
    let report = res
        .means()
        .iter()
        .zip(&res.values)
        .map(|((o, p), v)| format!("{} {} oracle {} protected {}", res.axis.name(), v.label(), fmt6(*o), fmt6(*p)))
        .collect();
    finish(run, report)
}

/// `0.5 + 0.5 d / max|d|` per channel value; identical inputs give mid-gray.
pub fn render_delta(protected: &Tensor<f32>, original: &Tensor<f32>) -> Result<(Tensor<f32>, f32)> {
    if protected.shape() != original.shape() {
        return Err(Error::Shape(format!(
            "render-delta inputs differ in shape: {:?} vs {:?}",
            protected.shape(),
            original.shape()
        )));
    }
    let d = protected.zip_map(original, |a, b| a - b)?;
    let max = d.max_abs();
    let img = d.map(|v| if max > 0.0 { 0.5 + 0.5 * v / max } else { 0.5 });
    Ok((img, max))
}

fn cmd_render_delta(cfg: &RunConfig, echo: &Value, root: &Path) -> Result<Outcome> {
    let need = |p: &Option<PathBuf>, key: &str| {
        p.clone()
            .ok_or_else(|| Error::Config(format!("{key} is required for render-delta")))
    };
    let protected = read_image(&need(&cfg.inputs.protected, "inputs.protected")?)?;
    let original = read_image(&need(&cfg.inputs.original, "inputs.original")?)?;
    let (img, max) = render_delta(&protected, &original)?;
    let mut run = RunDir::create(root, "render-delta", cfg.seed, echo.clone())?;
    run.write_ppm("delta.ppm", &img)?;
    finish(run, vec![format!("max_abs_delta={max:e}")])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_render_mid_gray() {
        let a = Tensor::full([16, 16, 3], 0.3f32);
        let (img, max) = render_delta(&a, &a).unwrap();
        assert_eq!(max, 0.0);
        assert!(img.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn uniform_positive_delta_renders_white() {
        let o = Tensor::full([16, 16, 3], 0.25f32);
        let p = o.map(|v| v + 0.05);
        let (img, max) = render_delta(&p, &o).unwrap();
        assert!((max - 0.05).abs() < 1e-6);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn command_names_round_trip() {
        for c in ["train", "protect", "inpaint", "attribute", "evaluate", "sweep", "render-delta"] {
            assert_eq!(Command::from_name(c).unwrap().name(), c);
        }
        assert!(Command::from_name("fly").is_none());
    }
}
