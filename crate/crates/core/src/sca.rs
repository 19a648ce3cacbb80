//! Cross-modal attention alignment. Each layer's record stacks the
//! image-queried attention over text keys/values on top of the text-queried
//! attention over image keys/values; the loss is the layer-averaged
//! Frobenius norm between a trainable branch's records and the detached
//! records of its frozen pretrained twin, computed on identical inputs.

use crate::model::{
    self, AdapterParams, AttentionState, Bound, BoundAdapter, ModelConfig, ModelError, Params,
    TokenBatch,
};
use crate::tensor::{Tape, Tensor, TensorError, TensorRef};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScaError {
    #[error("alignment records have {lhs} and {rhs} layers")]
    LayerMismatch { lhs: usize, rhs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What gets aligned between the branches. `Sca` is the main method; the
/// other two are ablation baselines behind the same interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Block-stacked cross-modal attention outputs.
    #[default]
    Sca,
    /// Full joint-attention outputs (all queries over all keys/values).
    FullAttn,
    /// Effective attention weight matrices themselves.
    Parameter,
}

/// Per-layer alignment targets living on one tape.
pub struct CorrespondenceRecord {
    pub layers: Vec<TensorRef>,
    pub n_text: usize,
    pub n_image: usize,
}

/// One layer's cross-modal record: rows [0, n_image) are image queries
/// attending to text keys/values, rows [n_image, n_image + n_text) are text
/// queries attending to image keys/values. Head split and per-head scale
/// match the model's own attention.
pub fn semantic_correspondence(
    tape: &mut Tape,
    state: &AttentionState,
    layer: usize,
    n_heads: usize,
) -> Result<TensorRef, ScaError> {
    let qkv = &state.layers[layer];
    let nt = state.n_text;
    let n = tape.shape(qkv.q)[0];
    assert!(nt >= 1 && n > nt, "both modalities must be present");
    let ni = n - nt;
    let qi = tape.slice(qkv.q, 0, nt, ni)?;
    let kt = tape.slice(qkv.k, 0, 0, nt)?;
    let vt = tape.slice(qkv.v, 0, 0, nt)?;
    let image_queried = model::attend(tape, qi, kt, vt, n_heads)?;
    let qt = tape.slice(qkv.q, 0, 0, nt)?;
    let ki = tape.slice(qkv.k, 0, nt, ni)?;
    let vi = tape.slice(qkv.v, 0, nt, ni)?;
    let text_queried = model::attend(tape, qt, ki, vi, n_heads)?;
    Ok(tape.concat(image_queried, text_queried, 0)?)
}

fn effective_weight(
    tape: &mut Tape,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    name: &str,
) -> Result<TensorRef, ScaError> {
    let w = bound.get(name)?;
    if let Some(a) = adapter {
        if let Some((down, up)) = a.lora_pair(name) {
            let delta = tape.matmul(down, up)?;
            let delta = tape.scale(delta, a.scaling)?;
            return Ok(tape.add(w, delta)?);
        }
    }
    Ok(w)
}

/// Assembles the per-layer record for `mode` from a captured forward.
pub fn alignment_record(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    state: &AttentionState,
    mode: AlignMode,
) -> Result<CorrespondenceRecord, ScaError> {
    let n = tape.shape(state.layers[0].q)[0];
    let n_text = state.n_text;
    let n_image = n - n_text;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let rec = match mode {
            AlignMode::Sca => semantic_correspondence(tape, state, l, cfg.n_heads)?,
            AlignMode::FullAttn => {
                let qkv = &state.layers[l];
                model::attend(tape, qkv.q, qkv.k, qkv.v, cfg.n_heads)?
            }
            AlignMode::Parameter => {
                let mut stacked = None;
                for w in ["attn_wq", "attn_wk", "attn_wv", "attn_wo"] {
                    let eff = effective_weight(tape, bound, adapter, &format!("layer{l}.{w}"))?;
                    stacked = Some(match stacked {
                        None => eff,
                        Some(acc) => tape.concat(acc, eff, 0)?,
                    });
                }
                stacked.unwrap()
            }
        };
        layers.push(rec);
    }
    Ok(CorrespondenceRecord { layers, n_text, n_image })
}

/// Forward pass that also returns the alignment record. A pure observer of
/// the prediction path.
pub fn capture_correspondence(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    batch: &TokenBatch,
    t: usize,
    t_max: usize,
    mode: AlignMode,
) -> Result<(TensorRef, CorrespondenceRecord), ScaError> {
    let (out, state) = model::mmdit_forward_captured(tape, cfg, bound, adapter, batch, t, t_max)?;
    let rec = alignment_record(tape, cfg, bound, adapter, &state, mode)?;
    Ok((out, rec))
}

/// Mean over layers of the Frobenius norm between the trainable record and
/// the frozen one. The frozen side enters as constants, so gradients flow
/// only into the trainable branch.
pub fn sca_loss(
    tape: &mut Tape,
    rec_f: &CorrespondenceRecord,
    rec_p: &[Tensor],
) -> Result<TensorRef, ScaError> {
    if rec_f.layers.len() != rec_p.len() {
        return Err(ScaError::LayerMismatch { lhs: rec_f.layers.len(), rhs: rec_p.len() });
    }
    let mut total = None;
    for (f, p) in rec_f.layers.iter().zip(rec_p) {
        let c = tape.constant(p);
        let d = tape.sub(*f, c)?;
        let n = tape.l2_norm(d)?;
        total = Some(match total {
            None => n,
            Some(acc) => tape.add(acc, n)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok(tape.scale(total, 1.0 / rec_p.len() as f32)?)
}

/// Per-layer drift magnitudes, plain values for reporting.
pub fn layer_drifts(tape: &Tape, rec_f: &CorrespondenceRecord, rec_p: &[Tensor]) -> Vec<f32> {
    rec_f
        .layers
        .iter()
        .zip(rec_p)
        .map(|(&f, p)| {
            let fd = tape.data(f);
            let s: f64 = fd
                .iter()
                .zip(&p.data)
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum();
            s.sqrt() as f32
        })
        .collect()
}

/// Both branches of one training step. The trainable branch (low-rank
/// adapters plus depth adapter over the frozen base) runs on `tape`; the
/// frozen twin runs the plain base model on a throwaway tape with gradients
/// disabled and only its detached outputs survive. Both consume the identical
/// noised grid, caption, timestep, and depth realization.
pub struct PairedForward {
    pub eps_pred: TensorRef,
    pub rec_f: CorrespondenceRecord,
    pub rec_p: Vec<Tensor>,
    pub frozen_eps: Tensor,
    /// Adapter bindings of the trainable branch, for the optimizer.
    pub adapter: BoundAdapter,
}

#[allow(clippy::too_many_arguments)]
pub fn paired_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    base: &Params,
    adapter: &AdapterParams,
    ids: &[usize],
    x_t: &Tensor,
    depth: &Tensor,
    t: usize,
    t_max: usize,
    mode: AlignMode,
) -> Result<PairedForward, ScaError> {
    let bound = base.bind(tape, false);
    let ba = adapter.bind(tape, true);
    let x_ref = tape.constant(x_t);
    let d_ref = tape.constant(depth);
    let batch = model::token_batch(tape, cfg, &bound, ids, x_ref, (0, 0))?;
    let batch = model::apply_depth_adapter(tape, cfg, &ba, &batch, d_ref)?;
    let (eps_pred, rec_f) =
        capture_correspondence(tape, cfg, &bound, Some(&ba), &batch, t, t_max, mode)?;

    let mut frozen = Tape::new();
    let fbound = base.bind(&mut frozen, false);
    let fx = frozen.constant(x_t);
    let fbatch = model::token_batch(&mut frozen, cfg, &fbound, ids, fx, (0, 0))?;
    let (fout, frec) =
        capture_correspondence(&mut frozen, cfg, &fbound, None, &fbatch, t, t_max, mode)?;
    let rec_p = frec.layers.iter().map(|&r| frozen.detach(r)).collect();
    let frozen_eps = frozen.detach(fout);

    Ok(PairedForward { eps_pred, rec_f, rec_p, frozen_eps, adapter: ba })
}
