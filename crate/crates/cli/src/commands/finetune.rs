//! Adapter fine-tuning on four-panel grids with the depth prior.
//!
//! The base stays frozen; LoRA factors and the depth adapter train under the
//! masked denoising loss plus the correspondence drift penalty when enabled.
//! Passing a fine-tune checkpoint as the base resumes it.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mvicl_core::diffusion::{batch_indices, train_step, MaskGrid, TrainSample};
use mvicl_core::model::AdapterParams;
use mvicl_core::tensor::Tensor;

use super::{load_config, load_samples, schedule, to_signal};
use crate::checkpoint::TrainState;

pub const CHECKPOINT_EVERY: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaSwitch {
    On,
    Off,
}

pub fn run(config_path: &Path, base: &Path, sca: ScaSwitch, out: &Path) -> Result<()> {
    let mut cfg = load_config(config_path)?;
    std::fs::create_dir_all(out)?;

    let loaded = TrainState::load(base)
        .with_context(|| format!("loading checkpoint {}", base.display()))?;
    if loaded.cfg != cfg.model {
        bail!("config model does not match the checkpoint architecture");
    }
    let mut state = match loaded.adapter {
        // A base-only checkpoint starts a fresh adapter; its optimizer
        // moments belong to pretraining and are dropped with it.
        None => TrainState::fresh(
            loaded.cfg,
            loaded.base,
            Some(AdapterParams::init(&cfg.model, cfg.train.seed)),
        ),
        Some(_) => loaded,
    };
    if state.step >= cfg.train.iterations {
        bail!(
            "checkpoint is already at step {}, config asks for {} iterations",
            state.step,
            cfg.train.iterations
        );
    }

    match sca {
        ScaSwitch::Off => cfg.train.sca_weight = 0.0,
        ScaSwitch::On => {
            if cfg.train.sca_weight == 0.0 {
                let fallback = mvicl_core::diffusion::TrainConfig::default().sca_weight;
                eprintln!(
                    "config has sca_weight = 0 but --sca on was asked; using {fallback}"
                );
                cfg.train.sca_weight = fallback;
            }
        }
    }

    let disk = load_samples(&cfg.data_dir)?;
    let grid_side = cfg.model.grid_side();
    let mut items: Vec<(Tensor, Tensor, MaskGrid, Vec<usize>)> = Vec::with_capacity(disk.len());
    for s in disk {
        if s.image.shape[1] != grid_side {
            bail!(
                "sample {}: grid side {} does not match the model canvas {}",
                s.name,
                s.image.shape[1],
                grid_side
            );
        }
        let mask = MaskGrid::from_depth(&s.depth)?;
        items.push((to_signal(&s.image), s.depth, mask, s.caption));
    }
    let sched = schedule();
    let mut opt = state.optimizer(cfg.train.learning_rate);

    let mut log = std::io::BufWriter::new(std::fs::File::create(out.join("finetune_log.csv"))?);
    writeln!(log, "step,l_diff,l_sca,l_total")?;
    for step in state.step..cfg.train.iterations {
        let idx = batch_indices(
            cfg.train.seed,
            "finetune.batch",
            step,
            items.len(),
            cfg.train.batch_size,
        );
        let batch: Vec<TrainSample> = idx
            .iter()
            .map(|&i| {
                let (image, depth, mask, caption) = &items[i];
                TrainSample { image, depth, mask, caption }
            })
            .collect();
        let adapter = state.adapter.as_mut().expect("fine-tune state holds an adapter");
        let rep = train_step(
            step,
            &cfg.model,
            &cfg.train,
            &sched,
            &state.base,
            adapter,
            &mut opt,
            &batch,
        )?;
        writeln!(log, "{},{},{},{}", rep.step, rep.l_diff, rep.l_sca, rep.l_total)?;
        if step == 0 {
            eprintln!("finetune step 0: l_diff {:.5}, l_sca {}", rep.l_diff, rep.l_sca);
        }
        state.step = step + 1;
        if state.step % CHECKPOINT_EVERY == 0 {
            state.absorb_optimizer(&opt);
            state.save(&out.join(format!("ckpt_step{:05}.ckpt", state.step)))?;
        }
        if state.step % 100 == 0 {
            eprintln!("finetune step {}: l_total {:.5}", state.step, rep.l_total);
        }
    }
    log.flush()?;
    state.absorb_optimizer(&opt);
    let final_path = out.join("ckpt_final.ckpt");
    state.save(&final_path)?;
    println!("fine-tuned {} steps; final checkpoint {}", state.step, final_path.display());
    Ok(())
}
