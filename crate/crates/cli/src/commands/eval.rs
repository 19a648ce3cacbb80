//! Metric evaluation over a directory of sampled grids.
//!
//! Every subdirectory with a grid.png is a candidate sample; its caption
//! sidecar supplies the attribute ground truth. Samples whose sidecar is
//! missing or unreadable are skipped and counted. The report CSV holds one
//! row per evaluated sample; aggregates go to stdout.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvicl_core::eval::{attribute_accuracy, mv_consistency_score, EvalError};
use mvicl_core::sim::camera::ring_cameras;

use super::parse_caption;
use crate::pngio;

/// Score charged when detection finds too little structure to triangulate:
/// the metric's own ceiling, every observation off by a full panel side.
pub const DETECT_FAIL_SCORE: f64 = 1000.0;

pub fn run(samples: &Path, report: &Path) -> Result<()> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(samples)
        .with_context(|| format!("reading samples dir {}", samples.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("grid.png").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no sample directories with a grid.png under {}", samples.display());
    }

    let mut csv = String::from("sample,mv_cons,attr_hue,attr_background,attr_accessory,attr_accuracy,status\n");
    let mut rows = 0usize;
    let mut skipped = 0usize;
    let (mut mv_sum, mut hue_sum, mut bg_sum, mut acc_sum, mut attr_sum) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for dir in &dirs {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let caption = match std::fs::read_to_string(dir.join("caption.txt")) {
            Ok(text) => match parse_caption(&text) {
                Ok(tokens) => tokens,
                Err(err) => {
                    eprintln!("skipping {name}: {err:#}");
                    skipped += 1;
                    continue;
                }
            },
            Err(_) => {
                eprintln!("skipping {name}: no caption.txt sidecar");
                skipped += 1;
                continue;
            }
        };
        let grid = pngio::load_rgb(&dir.join("grid.png"))
            .with_context(|| format!("sample {name}: grid.png"))?;
        let side = grid.shape[2] / 2;
        let cams = ring_cameras(side);

        let (mv, status) = match mv_consistency_score(&grid, &cams) {
            Ok(rep) => (rep.score, "ok"),
            Err(EvalError::NoUsableLandmarks) => (DETECT_FAIL_SCORE, "sparse"),
            Err(err) => return Err(err).with_context(|| format!("sample {name}")),
        };
        let attr = match attribute_accuracy(&[(&grid, caption.as_slice())]) {
            Ok(rep) => rep,
            Err(EvalError::InvalidCaption { tokens }) => {
                eprintln!("skipping {name}: caption {tokens:?} names no known appearance");
                skipped += 1;
                continue;
            }
            Err(err) => return Err(err).with_context(|| format!("sample {name}")),
        };

        csv.push_str(&format!(
            "{name},{mv:.6},{:.0},{:.0},{:.0},{:.6},{status}\n",
            attr.hue, attr.background, attr.accessory, attr.mean
        ));
        rows += 1;
        mv_sum += mv;
        hue_sum += attr.hue;
        bg_sum += attr.background;
        acc_sum += attr.accessory;
        attr_sum += attr.mean;
    }
    if rows == 0 {
        bail!("every candidate sample under {} was skipped", samples.display());
    }

    if let Some(parent) = report.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(report, &csv)?;

    let n = rows as f64;
    let mut outp = std::io::stdout().lock();
    writeln!(outp, "samples evaluated: {rows}")?;
    writeln!(outp, "samples skipped: {skipped}")?;
    writeln!(outp, "mean mv_cons: {:.6}", mv_sum / n)?;
    writeln!(outp, "mean attr_hue: {:.6}", hue_sum / n)?;
    writeln!(outp, "mean attr_background: {:.6}", bg_sum / n)?;
    writeln!(outp, "mean attr_accessory: {:.6}", acc_sum / n)?;
    writeln!(outp, "mean attr_accuracy: {:.6}", attr_sum / n)?;
    writeln!(outp, "report: {}", report.display())?;
    Ok(())
}
