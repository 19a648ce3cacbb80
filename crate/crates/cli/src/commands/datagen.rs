//! Dataset generation: rendered grids, depth grids, captions, poses, and a
//! checksummed manifest.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mvicl_core::sim::gen_dataset;

use super::format_caption;
use crate::checkpoint::crc32;
use crate::pngio;
use crate::posefile;

pub fn run(n: usize, seed: u64, side: usize, out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let occupied = std::fs::read_dir(out)
            .with_context(|| format!("inspecting {}", out.display()))?
            .next()
            .is_some();
        if occupied && !force {
            bail!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            );
        }
    }
    std::fs::create_dir_all(out)?;

    let samples = gen_dataset(n, seed, side)?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let dir = out.join(format!("sample_{i:04}"));
        std::fs::create_dir_all(&dir)?;
        pngio::save_rgb(&dir.join("grid.png"), &s.image)?;
        pngio::save_depth16(&dir.join("depth.png"), &s.depth)?;
        std::fs::write(dir.join("caption.txt"), format_caption(&s.caption) + "\n")?;
        posefile::write_pose(&dir.join("pose.json"), &s.pose)?;

        let mut bytes = Vec::new();
        for file in ["grid.png", "depth.png", "caption.txt", "pose.json"] {
            bytes.extend_from_slice(&std::fs::read(dir.join(file))?);
        }
        manifest.push_str(&format!("sample_{i:04} {:08x}\n", crc32(&bytes)));
    }
    std::fs::write(out.join("manifest.txt"), &manifest)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    println!("manifest checksum: {:08x}", crc32(manifest.as_bytes()));
    Ok(())
}
