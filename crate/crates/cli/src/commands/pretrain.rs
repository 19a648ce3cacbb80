//! Base-model pretraining on single captioned panels.
//!
//! Each grid sample contributes its four panels as independent items, every
//! panel placed at its own quadrant origin of the canvas so positional
//! encodings match where the panel would sit inside a full grid. The loss
//! covers whole panels.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mvicl_core::diffusion::{batch_indices, pretrain_step, MaskGrid, PretrainSample};
use mvicl_core::model::Params;
use mvicl_core::sim::split_grid;
use mvicl_core::tensor::Tensor;

use super::{load_config, load_samples, schedule, to_signal};
use crate::checkpoint::TrainState;

pub const CHECKPOINT_EVERY: usize = 200;

pub fn run(config_path: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(config_path)?;
    std::fs::create_dir_all(out)?;

    let mut state = match resume {
        Some(path) => {
            let st = TrainState::load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if st.adapter.is_some() {
                bail!("{} holds a fine-tune checkpoint; resume it with finetune", path.display());
            }
            if st.cfg != cfg.model {
                bail!("config model does not match the checkpoint architecture");
            }
            st
        }
        None => TrainState::fresh(
            cfg.model.clone(),
            Params::init(&cfg.model, cfg.train.seed),
            None,
        ),
    };
    if state.step >= cfg.train.iterations {
        bail!(
            "checkpoint is already at step {}, config asks for {} iterations",
            state.step,
            cfg.train.iterations
        );
    }

    // Panel pool: (signal panel, caption, origin in patch units).
    let disk = load_samples(&cfg.data_dir)?;
    let origin_step = cfg.model.image_side / cfg.model.patch_size;
    let mut pool: Vec<(Tensor, Vec<usize>, (usize, usize))> = Vec::new();
    for s in &disk {
        let panels = split_grid(&s.image)?;
        for (q, panel) in panels.iter().enumerate() {
            if panel.shape[1] != cfg.model.image_side {
                bail!(
                    "sample {}: panel side {} does not match model.image_side {}",
                    s.name,
                    panel.shape[1],
                    cfg.model.image_side
                );
            }
            let origin = (q / 2 * origin_step, q % 2 * origin_step);
            pool.push((to_signal(panel), s.caption.clone(), origin));
        }
    }
    let mask = MaskGrid::ones(cfg.model.image_side, cfg.model.image_side);
    let sched = schedule();
    let mut opt = state.optimizer(cfg.train.learning_rate);

    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("pretrain_log.csv"))?);
    writeln!(log, "step,l_diff")?;
    for step in state.step..cfg.train.iterations {
        let idx = batch_indices(
            cfg.train.seed,
            "pretrain.batch",
            step,
            pool.len(),
            cfg.train.batch_size,
        );
        let batch: Vec<PretrainSample> = idx
            .iter()
            .map(|&i| PretrainSample {
                panel: &pool[i].0,
                mask: &mask,
                caption: &pool[i].1,
                origin: pool[i].2,
            })
            .collect();
        let rep =
            pretrain_step(step, &cfg.model, &cfg.train, &sched, &mut state.base, &mut opt, &batch)?;
        writeln!(log, "{},{}", rep.step, rep.l_diff)?;
        state.step = step + 1;
        if state.step % CHECKPOINT_EVERY == 0 {
            state.absorb_optimizer(&opt);
            state.save(&out.join(format!("ckpt_step{:05}.ckpt", state.step)))?;
        }
        if state.step % 100 == 0 {
            eprintln!("pretrain step {}: l_diff {:.5}", state.step, rep.l_diff);
        }
    }
    log.flush()?;
    state.absorb_optimizer(&opt);
    let final_path = out.join("ckpt_final.ckpt");
    state.save(&final_path)?;
    println!("pretrained {} steps; final checkpoint {}", state.step, final_path.display());
    Ok(())
}
