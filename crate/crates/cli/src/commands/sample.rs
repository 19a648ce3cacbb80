//! Two-stage sampling: a pose becomes a four-view depth grid, then DDIM with
//! classifier-free guidance generates the color grid conditioned on that
//! depth and the caption.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mvicl_core::diffusion::ddim_sample;
use mvicl_core::sim::body::canonical_centroid;
use mvicl_core::sim::camera::RING_RADIUS;
use mvicl_core::sim::{fit_pose, render_sample, split_grid, BodyPose, Camera};

use super::{format_caption, from_signal, parse_caption, schedule};
use crate::checkpoint::TrainState;
use crate::pngio;
use crate::posefile;

pub struct SampleArgs<'a> {
    pub checkpoint: &'a Path,
    pub caption: &'a str,
    pub pose: Option<&'a Path>,
    pub fit: Option<&'a Path>,
    pub steps: usize,
    pub cfg_scale: f32,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn run(args: &SampleArgs) -> Result<()> {
    let state = TrainState::load(args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let tokens = parse_caption(args.caption)?;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= state.cfg.vocab_size) {
        bail!("caption token {bad} exceeds the vocabulary of {}", state.cfg.vocab_size);
    }
    if !(args.cfg_scale.is_finite() && args.cfg_scale >= 0.0) {
        bail!("--cfg must be finite and nonnegative, got {}", args.cfg_scale);
    }

    // Stage 1: obtain the pose, by file or by fitting keypoints.
    let mut fit_note = String::from("fit = none\n");
    let pose: BodyPose = match (args.pose, args.fit) {
        (Some(p), None) => posefile::read_pose(p)
            .with_context(|| format!("reading pose {}", p.display()))?,
        (None, Some(k)) => {
            let kf = posefile::read_keypoints(k)
                .with_context(|| format!("reading keypoints {}", k.display()))?;
            let cam =
                Camera::on_ring(kf.azimuth_deg, RING_RADIUS, canonical_centroid(), kf.side);
            let report = fit_pose(&kf.points, &cam, &BodyPose::neutral())?;
            if !report.converged {
                eprintln!(
                    "warning: pose fit did not converge after {} iterations (rms {:.4} px); \
                     proceeding with the best pose found",
                    report.iterations, report.rms
                );
            }
            fit_note = format!(
                "fit_converged = {}\nfit_iterations = {}\nfit_rms_px = {}\n",
                report.converged, report.iterations, report.rms
            );
            report.pose
        }
        _ => bail!("exactly one of --pose and --fit must be given"),
    };

    // The rendered sample supplies the depth grid; its color panels are not
    // used for generation.
    let rendered = render_sample(&pose, state.cfg.image_side)?;
    let depth_grid = rendered.depth;

    let conditioned = state.adapter.is_some();
    if !conditioned {
        eprintln!("checkpoint has no depth adapter; sampling is unconditioned on depth");
    }
    let sched = schedule();
    let x = ddim_sample(
        &state.cfg,
        &state.base,
        state.adapter.as_ref(),
        &sched,
        &tokens,
        conditioned.then_some(&depth_grid),
        args.steps,
        args.cfg_scale,
        args.seed,
    )?;
    let grid = from_signal(&x);

    std::fs::create_dir_all(args.out)?;
    pngio::save_rgb(&args.out.join("grid.png"), &grid)?;
    for (i, panel) in split_grid(&grid)?.iter().enumerate() {
        pngio::save_rgb(&args.out.join(format!("panel_{i}.png")), panel)?;
    }
    pngio::save_depth16(&args.out.join("depth.png"), &depth_grid)?;
    std::fs::write(args.out.join("caption.txt"), format_caption(&tokens) + "\n")?;
    let meta = format!(
        "depth_conditioning = {}\nsteps = {}\ncfg = {}\nseed = {}\n{fit_note}",
        if conditioned { "on" } else { "off" },
        args.steps,
        args.cfg_scale,
        args.seed,
    );
    std::fs::write(args.out.join("meta.txt"), meta)?;
    println!("sampled grid written to {}", args.out.display());
    Ok(())
}
