use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::tensor::{write_tnsr, Tensor};
use crate::{imageio, Result};

/// Everything a run wrote, plus what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub checkpoint_hash: Option<String>,
    /// Dataset seeds of the images processed.
    pub corpus_seeds: Vec<u64>,
    /// Paths relative to the run directory.
    pub outputs: Vec<String>,
    pub protect_calls: u64,
    pub forward_passes: u64,
    /// Items skipped, with the reason.
    pub excluded: Vec<String>,
    pub wall_time_s: f64,
    /// Peak resident set size in KiB, where the platform reports it.
    pub peak_rss_kb: Option<u64>,
}

/// `VmHWM` from `/proc/self/status`.
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

/// A run directory under construction.
#[derive(Debug)]
pub struct RunDir {
    pub dir: PathBuf,
    started: Instant,
    pub manifest: RunManifest,
}

impl RunDir {
    /// Create `<root>/<command>-<unix seconds>-s<seed>`, adding a counter
    /// suffix if that name is taken.
    pub fn create(root: &Path, command: &str, seed: u64, config: Value) -> Result<Self> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        std::fs::create_dir_all(root)?;
        let base = format!("{command}-{stamp}-s{seed}");
        let mut dir = root.join(&base);
        let mut n = 1;
        while dir.exists() {
            dir = root.join(format!("{base}-{n}"));
            n += 1;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config,
                checkpoint_hash: None,
                corpus_seeds: Vec::new(),
                outputs: Vec::new(),
                protect_calls: 0,
                forward_passes: 0,
                excluded: Vec::new(),
                wall_time_s: 0.0,
                peak_rss_kb: None,
            },
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record(&mut self, rel: &str) {
        self.manifest.outputs.push(rel.to_string());
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, bytes)?;
        self.record(rel);
        Ok(p)
    }

    pub fn write_ppm(&mut self, rel: &str, img: &Tensor<f32>) -> Result<PathBuf> {
        self.write(rel, imageio::encode_ppm(img))
    }

    pub fn write_pgm(&mut self, rel: &str, m: &Tensor<f32>) -> Result<PathBuf> {
        self.write(rel, imageio::encode_pgm(m))
    }

    pub fn write_tnsr(&mut self, rel: &str, t: &Tensor<f32>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        write_tnsr(t, &mut buf)?;
        self.write(rel, buf)
    }

    pub fn write_json(&mut self, rel: &str, v: &impl Serialize) -> Result<PathBuf> {
        self.write(rel, serde_json::to_string_pretty(v)? + "\n")
    }

    /// Record files written by other code (paths under the run directory).
    pub fn adopt(&mut self, paths: &[PathBuf]) {
        for p in paths {
            if let Ok(rel) = p.strip_prefix(&self.dir) {
                self.record(&rel.to_string_lossy());
            }
        }
    }

    /// Stamp timing and memory, then write `manifest.json`.
    pub fn finish(mut self) -> Result<(PathBuf, RunManifest)> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        self.manifest.peak_rss_kb = peak_rss_kb();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok((self.dir, self.manifest))
    }
}
