//! Adapter fine-tuning and base pretraining steps.
//!
//! Every random draw comes from a stream keyed by (seed, label, step), so a
//! run resumed from a checkpoint at step k replays exactly the draws the
//! uninterrupted run would have made.

use std::collections::BTreeMap;

use rand::Rng;

use super::loss::{masked_diff_loss, MaskGrid};
use super::optim::AdamW;
use super::schedule::{forward_noising, NoiseSchedule};
use super::DiffusionError;
use crate::model::{self, AdapterParams, ModelConfig, Params};
use crate::rng;
use crate::sca::{self, AlignMode};
use crate::tensor::{Tape, Tensor, TensorRef};

/// Per-timestep loss weight w_t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightPolicy {
    /// The same weight at every timestep.
    Constant(f32),
    /// The marginal noise variance, w_t = 1 - alpha_bar(t).
    SigmaSq,
}

impl WeightPolicy {
    pub fn at(&self, t: usize, sched: &NoiseSchedule) -> f32 {
        match self {
            WeightPolicy::Constant(w) => *w,
            WeightPolicy::SigmaSq => 1.0 - sched.alpha_bar(t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Probability of replacing the caption with the null token.
    pub cfg_dropout_prob: f32,
    pub weight: WeightPolicy,
    /// Coefficient on the correspondence drift term; 0 disables the frozen
    /// branch entirely.
    pub sca_weight: f32,
    pub align_mode: AlignMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 800,
            learning_rate: 1e-4,
            batch_size: 4,
            cfg_dropout_prob: 0.1,
            weight: WeightPolicy::Constant(1.0),
            sca_weight: 1.0,
            align_mode: AlignMode::Sca,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |reason: String| Err(DiffusionError::Config { reason });
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be finite and positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_prob) {
            return bad(format!("cfg_dropout_prob must lie in [0, 1], got {}", self.cfg_dropout_prob));
        }
        if let WeightPolicy::Constant(w) = self.weight {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("constant weight must be finite and nonnegative, got {w}"));
            }
        }
        if !(self.sca_weight.is_finite() && self.sca_weight >= 0.0) {
            return bad(format!("sca_weight must be finite and nonnegative, got {}", self.sca_weight));
        }
        Ok(())
    }
}

/// One training sample: a full grid image with its depth prior and loss mask.
pub struct TrainSample<'a> {
    pub image: &'a Tensor,
    pub depth: &'a Tensor,
    pub mask: &'a MaskGrid,
    pub caption: &'a [usize],
}

/// One pretraining sample: a single panel placed at `origin` (in patch units)
/// of the full positional grid.
pub struct PretrainSample<'a> {
    pub panel: &'a Tensor,
    pub mask: &'a MaskGrid,
    pub caption: &'a [usize],
    pub origin: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub l_diff: f32,
    pub l_sca: f32,
    pub l_total: f32,
}

/// Sample indices for one step, with replacement, reproducible per step.
pub fn batch_indices(seed: u64, label: &str, step: usize, n: usize, k: usize) -> Vec<usize> {
    assert!(n > 0);
    let mut r = rng::indexed_stream(seed, label, step as u64);
    (0..k).map(|_| r.gen_range(0..n)).collect()
}

fn accumulate<'a>(
    acc: &mut BTreeMap<String, Vec<f64>>,
    tape: &Tape,
    refs: impl Iterator<Item = (&'a String, TensorRef)>,
) {
    for (name, r) in refs {
        if let Some(g) = tape.grad(r) {
            let slot = acc.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (s, &v) in slot.iter_mut().zip(g) {
                *s += f64::from(v);
            }
        }
    }
}

fn mean_grads(acc: BTreeMap<String, Vec<f64>>, batch: usize) -> BTreeMap<String, Vec<f32>> {
    let inv = 1.0 / batch as f64;
    acc.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|g| (g * inv) as f32).collect()))
        .collect()
}

fn check_finite(tape: &Tape, loss: TensorRef) -> Result<(), DiffusionError> {
    if tape.data(loss)[0].is_finite() {
        return Ok(());
    }
    let (op, index) = tape.first_non_finite().unwrap_or(("loss", 0));
    Err(DiffusionError::NonFinite { op, index })
}

/// One adapter update. Per sample: draw a timestep, noise, and caption
/// dropout; run the adapted forward (paired with the frozen branch when the
/// drift term is active); backpropagate the combined loss. Gradients are
/// averaged over the batch and applied to the adapter only.
pub fn train_step(
    step: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sched: &NoiseSchedule,
    base: &Params,
    adapter: &mut AdapterParams,
    opt: &mut AdamW,
    batch: &[TrainSample],
) -> Result<StepReport, DiffusionError> {
    assert!(!batch.is_empty());
    let mut r = rng::indexed_stream(tcfg.seed, "train.draws", step as u64);
    let null = [0usize];
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let (mut diff_sum, mut sca_sum) = (0f64, 0f64);
    for s in batch {
        let t = r.gen_range(1..=sched.t_max());
        let eps = Tensor::new(rng::normal_f32s(&mut r, s.image.numel()), s.image.shape.clone());
        let ids: &[usize] =
            if r.gen::<f64>() < f64::from(tcfg.cfg_dropout_prob) { &null } else { s.caption };
        let x_t = forward_noising(s.image, t, &eps, sched)?;
        let mut tape = Tape::new();
        if tcfg.sca_weight > 0.0 {
            let pf = sca::paired_forward(
                &mut tape,
                mcfg,
                base,
                adapter,
                ids,
                &x_t,
                s.depth,
                t,
                sched.t_max(),
                tcfg.align_mode,
            )?;
            let l_diff =
                masked_diff_loss(&mut tape, pf.eps_pred, &eps, s.mask, tcfg.weight.at(t, sched), mcfg.patch_size)?;
            let l_sca = sca::sca_loss(&mut tape, &pf.rec_f, &pf.rec_p)?;
            let weighted = tape.scale(l_sca, tcfg.sca_weight)?;
            let total = tape.add(l_diff, weighted)?;
            check_finite(&tape, total)?;
            tape.backward(total)?;
            accumulate(&mut acc, &tape, pf.adapter.refs());
            diff_sum += f64::from(tape.data(l_diff)[0]);
            sca_sum += f64::from(tape.data(l_sca)[0]);
        } else {
            let bound = base.bind(&mut tape, false);
            let ba = adapter.bind(&mut tape, true);
            let xr = tape.constant(&x_t);
            let dr = tape.constant(s.depth);
            let tokens = model::token_batch(&mut tape, mcfg, &bound, ids, xr, (0, 0))?;
            let tokens = model::apply_depth_adapter(&mut tape, mcfg, &ba, &tokens, dr)?;
            let out = model::mmdit_forward(&mut tape, mcfg, &bound, Some(&ba), &tokens, t, sched.t_max())?;
            let l_diff =
                masked_diff_loss(&mut tape, out, &eps, s.mask, tcfg.weight.at(t, sched), mcfg.patch_size)?;
            check_finite(&tape, l_diff)?;
            tape.backward(l_diff)?;
            accumulate(&mut acc, &tape, ba.refs());
            diff_sum += f64::from(tape.data(l_diff)[0]);
        }
    }
    let b = batch.len();
    let grads = mean_grads(acc, b);
    opt.lr = tcfg.learning_rate;
    opt.step(&mut adapter.map, &grads);
    let l_diff = (diff_sum / b as f64) as f32;
    let l_sca = (sca_sum / b as f64) as f32;
    let l_total = if tcfg.sca_weight > 0.0 { l_diff + tcfg.sca_weight * l_sca } else { l_diff };
    Ok(StepReport { step, l_diff, l_sca, l_total })
}

/// One base-model update on single panels. Every base parameter trains; no
/// adapter or frozen branch is involved.
pub fn pretrain_step(
    step: usize,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sched: &NoiseSchedule,
    base: &mut Params,
    opt: &mut AdamW,
    batch: &[PretrainSample],
) -> Result<StepReport, DiffusionError> {
    assert!(!batch.is_empty());
    let mut r = rng::indexed_stream(tcfg.seed, "pretrain.draws", step as u64);
    let null = [0usize];
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut diff_sum = 0f64;
    for s in batch {
        let t = r.gen_range(1..=sched.t_max());
        let eps = Tensor::new(rng::normal_f32s(&mut r, s.panel.numel()), s.panel.shape.clone());
        let ids: &[usize] =
            if r.gen::<f64>() < f64::from(tcfg.cfg_dropout_prob) { &null } else { s.caption };
        let x_t = forward_noising(s.panel, t, &eps, sched)?;
        let mut tape = Tape::new();
        let bound = base.bind(&mut tape, true);
        let xr = tape.constant(&x_t);
        let tokens = model::token_batch(&mut tape, mcfg, &bound, ids, xr, s.origin)?;
        let out = model::mmdit_forward(&mut tape, mcfg, &bound, None, &tokens, t, sched.t_max())?;
        let l_diff = masked_diff_loss(&mut tape, out, &eps, s.mask, tcfg.weight.at(t, sched), mcfg.patch_size)?;
        check_finite(&tape, l_diff)?;
        tape.backward(l_diff)?;
        accumulate(&mut acc, &tape, bound.refs());
        diff_sum += f64::from(tape.data(l_diff)[0]);
    }
    let b = batch.len();
    let grads = mean_grads(acc, b);
    opt.lr = tcfg.learning_rate;
    opt.step(&mut base.map, &grads);
    let l_diff = (diff_sum / b as f64) as f32;
    Ok(StepReport { step, l_diff, l_sca: 0.0, l_total: l_diff })
}
