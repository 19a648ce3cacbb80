//! Command implementations behind the thin argument parser.

pub mod datagen;
pub mod eval;
pub mod finetune;
pub mod pretrain;
pub mod sample;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvicl_core::diffusion::NoiseSchedule;
use mvicl_core::tensor::Tensor;

use crate::config::{Parsed, RunConfig};
use crate::pngio;

/// Diffusion process length shared by every command.
pub const T_STEPS: usize = 100;

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::cosine(T_STEPS)
}

/// [0,1] image to the [-1,1] signal range the denoiser works in.
pub fn to_signal(t: &Tensor) -> Tensor {
    Tensor::new(t.data.iter().map(|v| v * 2.0 - 1.0).collect(), t.shape.clone())
}

/// [-1,1] model output back to a displayable [0,1] image.
pub fn from_signal(t: &Tensor) -> Tensor {
    Tensor::new(
        t.data.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
        t.shape.clone(),
    )
}

pub fn parse_caption(s: &str) -> Result<Vec<usize>> {
    let tokens: Vec<usize> = s
        .split_whitespace()
        .map(|w| w.parse().with_context(|| format!("caption token {w:?} is not an integer")))
        .collect::<Result<_>>()?;
    if tokens.is_empty() {
        bail!("caption must hold at least one token id");
    }
    Ok(tokens)
}

pub fn format_caption(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let Parsed { config, defaulted } =
        RunConfig::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !defaulted.is_empty() {
        eprintln!("config: defaults used for {}", defaulted.join(", "));
    }
    Ok(config)
}

/// One dataset sample as stored on disk. `image` stays in [0,1].
pub struct DiskSample {
    pub name: String,
    pub image: Tensor,
    pub depth: Tensor,
    pub caption: Vec<usize>,
}

/// Load every sample directory under `dir`, in name order.
pub fn load_samples(dir: &Path) -> Result<Vec<DiskSample>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading dataset dir {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("grid.png").is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no sample directories with a grid.png under {}", dir.display());
    }
    let mut out = Vec::with_capacity(names.len());
    for p in names {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let image = pngio::load_rgb(&p.join("grid.png"))
            .with_context(|| format!("sample {name}: grid.png"))?;
        let depth = pngio::load_depth16(&p.join("depth.png"))
            .with_context(|| format!("sample {name}: depth.png"))?;
        let caption_text = std::fs::read_to_string(p.join("caption.txt"))
            .with_context(|| format!("sample {name}: caption.txt"))?;
        let caption =
            parse_caption(&caption_text).with_context(|| format!("sample {name}: caption.txt"))?;
        if depth.shape[1..] != image.shape[1..] {
            bail!(
                "sample {name}: depth {:?} does not cover image {:?}",
                depth.shape,
                image.shape
            );
        }
        out.push(DiskSample { name, image, depth, caption });
    }
    Ok(out)
}
