//! Toy multimodal diffusion transformer: learned text-token and image-patch
//! embeddings share one sequence, every layer runs joint attention over the
//! concatenated sequence, and a timestep embedding modulates per-layer scale,
//! shift, and gate vectors. Low-rank attention adapters and an additive
//! depth-patch adapter hang off the frozen base weights for fine-tuning.

pub mod lora;

pub use lora::{AdapterParams, BoundAdapter, LoraDelta};

use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, TensorRef};
use std::collections::BTreeMap;
use thiserror::Error;

/// Image channels are fixed; the whole pipeline is RGB.
pub const CHANNELS: usize = 3;

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("{what}: expected {expected:?}, got {got:?}")]
    Dimension {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("timestep {t} outside schedule range 0..={t_max}")]
    Timestep { t: usize, t_max: usize },
    #[error("missing parameter {name}")]
    MissingParam { name: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub lora_rank: usize,
    /// Side of one generated panel in pixels; the four-panel canvas is twice
    /// this on each side.
    pub image_side: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            patch_size: 4,
            vocab_size: 15,
            lora_rank: 8,
            image_side: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| Err(ModelError::InvalidConfig { reason });
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("zero-sized model".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return fail(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.lora_rank == 0 {
            return fail("lora rank must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return fail("empty vocabulary".into());
        }
        Ok(())
    }

    /// Four-panel canvas side in pixels.
    pub fn grid_side(&self) -> usize {
        2 * self.image_side
    }

    /// Tokens covering the full canvas.
    pub fn n_image_tokens(&self) -> usize {
        let g = self.grid_side() / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

// ── Parameters ───────────────────────────────────────────────────────────

/// Base model weights, keyed by canonical name. BTreeMap keeps every
/// iteration (initialization, optimizer steps, checkpointing) in one fixed
/// order.
#[derive(Debug, Clone)]
pub struct Params {
    pub map: BTreeMap<String, Tensor>,
}

pub(crate) fn fingerprint_map(map: &BTreeMap<String, Tensor>) -> u64 {
    // FNV-1a over names and value bits.
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (k, v) in map {
        eat(k.as_bytes());
        for x in &v.data {
            eat(&x.to_bits().to_le_bytes());
        }
    }
    h
}

/// Gram-Schmidt in f64 over the rows; panics only if rows exceed columns.
fn orthonormal_rows(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor {
    assert!(rows <= cols);
    let mut s = rng::stream(seed, name);
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| rng::standard_normal(&mut s)).collect())
        .collect();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            for c in 0..cols {
                m[i][c] -= dot * m[j][c];
            }
        }
        let norm: f64 = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..cols {
            m[i][c] /= norm;
        }
    }
    let data = m.into_iter().flatten().map(|v| v as f32).collect();
    Tensor::new(data, vec![rows, cols])
}

impl Params {
    /// Training initialization: modulation outputs and the prediction head
    /// start at zero so the freshly built model is the identity-plus-nothing
    /// function (output exactly zero), which keeps early updates stable.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        Self::build(cfg, seed, 0.02, true)
    }

    /// Every weight nonzero Gaussian. Property tests need generic weights;
    /// the zero-init pattern above hides gradients behind zero gates.
    pub fn init_generic(cfg: &ModelConfig, seed: u64, sigma: f32) -> Self {
        Self::build(cfg, seed, sigma, false)
    }

    fn build(cfg: &ModelConfig, seed: u64, sigma: f32, zero_heads: bool) -> Self {
        let d = cfg.d_model;
        let pd = cfg.patch_dim();
        let mut map = BTreeMap::new();
        let mut gauss = |name: &str, shape: Vec<usize>| {
            let n = shape.iter().product();
            let mut s = rng::stream(seed, name);
            let data = rng::normal_f32s(&mut s, n).into_iter().map(|v| v * sigma).collect();
            Tensor::new(data, shape)
        };
        let zeros_or = |gauss: &mut dyn FnMut(&str, Vec<usize>) -> Tensor,
                        name: &str,
                        shape: Vec<usize>| {
            if zero_heads {
                Tensor::zeros(shape)
            } else {
                gauss(name, shape)
            }
        };

        map.insert("text_embed".into(), gauss("text_embed", vec![cfg.vocab_size, d]));
        let patch_w = if pd <= d {
            orthonormal_rows(pd, d, seed, "patch_proj_w")
        } else {
            gauss("patch_proj_w", vec![pd, d])
        };
        map.insert("patch_proj_w".into(), patch_w);
        map.insert("patch_proj_b".into(), Tensor::zeros(vec![d]));
        map.insert("modality_embed".into(), gauss("modality_embed", vec![2, d]));
        map.insert("temb_w1".into(), gauss("temb_w1", vec![d, d]));
        map.insert("temb_b1".into(), Tensor::zeros(vec![d]));
        map.insert("temb_w2".into(), gauss("temb_w2", vec![d, d]));
        map.insert("temb_b2".into(), Tensor::zeros(vec![d]));
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for w in ["attn_wq", "attn_wk", "attn_wv", "attn_wo"] {
                map.insert(p(w), gauss(&p(w), vec![d, d]));
            }
            for b in ["attn_bq", "attn_bk", "attn_bv", "attn_bo"] {
                map.insert(p(b), Tensor::zeros(vec![d]));
            }
            map.insert(p("mlp_w1"), gauss(&p("mlp_w1"), vec![d, 4 * d]));
            map.insert(p("mlp_b1"), Tensor::zeros(vec![4 * d]));
            map.insert(p("mlp_w2"), gauss(&p("mlp_w2"), vec![4 * d, d]));
            map.insert(p("mlp_b2"), Tensor::zeros(vec![d]));
            map.insert(p("mod_w"), zeros_or(&mut gauss, &p("mod_w"), vec![d, 6 * d]));
            map.insert(p("mod_b"), zeros_or(&mut gauss, &p("mod_b"), vec![6 * d]));
        }
        map.insert("head_w".into(), zeros_or(&mut gauss, "head_w", vec![d, pd]));
        map.insert("head_b".into(), zeros_or(&mut gauss, "head_b", vec![pd]));
        Params { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.map
            .get(name)
            .ok_or_else(|| ModelError::MissingParam { name: name.to_string() })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let r = if trainable { tape.param(v) } else { tape.constant(v) };
                (k.clone(), r)
            })
            .collect();
        Bound { map }
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_map(&self.map)
    }
}

/// Base weights already recorded on a tape.
pub struct Bound {
    map: BTreeMap<String, TensorRef>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<TensorRef, ModelError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam { name: name.to_string() })
    }

    pub fn refs(&self) -> impl Iterator<Item = (&String, TensorRef)> {
        self.map.iter().map(|(k, v)| (k, *v))
    }
}

// ── Positional encodings ─────────────────────────────────────────────────

/// Interleaved sin/cos encoding of a scalar position.
fn sin_cos_1d(pos: f64, dim: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), dim);
    for (i, slot) in out.iter_mut().enumerate() {
        let k = (i / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * k / dim as f64);
        *slot = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
    }
}

/// Timestep embedding, shape [1, dim].
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let mut data = vec![0.0f32; dim];
    sin_cos_1d(t, dim, &mut data);
    Tensor::new(data, vec![1, dim])
}

/// Sequence-index encoding for text tokens, shape [n, dim].
pub fn text_positions(n: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0f32; n * dim];
    for i in 0..n {
        sin_cos_1d(i as f64, dim, &mut data[i * dim..(i + 1) * dim]);
    }
    Tensor::new(data, vec![n, dim])
}

/// Two-dimensional patch-grid encoding: the first half of each row encodes
/// the column index, the second half the row index. `origin` offsets both,
/// so a sub-grid embedded alone carries the same positions it would inside
/// the full canvas.
pub fn image_positions(gh: usize, gw: usize, origin: (usize, usize), dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0f32; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = (gy * gw + gx) * dim;
            sin_cos_1d((origin.1 + gx) as f64, half, &mut data[row..row + half]);
            sin_cos_1d((origin.0 + gy) as f64, dim - half, &mut data[row + half..row + dim]);
        }
    }
    Tensor::new(data, vec![gh * gw, dim])
}

// ── Token assembly ───────────────────────────────────────────────────────

/// Joint sequence: text block first, then image block.
pub struct TokenBatch {
    pub tokens: TensorRef,
    pub n_text: usize,
    pub n_image: usize,
    /// Per-token grid coordinates: (sequence index, -1) for text tokens,
    /// (column, row) in patch units for image tokens.
    pub positions: Vec<[f32; 2]>,
}

/// Learned lookup plus sequence-position encoding plus the text modality
/// vector. An empty prompt becomes the mandatory null token (id 0).
pub fn embed_text(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    ids: &[usize],
) -> Result<TensorRef, ModelError> {
    let ids: Vec<usize> = if ids.is_empty() { vec![0] } else { ids.to_vec() };
    for &id in &ids {
        if id >= cfg.vocab_size {
            return Err(ModelError::Vocab { id, vocab: cfg.vocab_size });
        }
    }
    let table = bound.get("text_embed")?;
    let emb = tape.gather(table, &ids)?;
    let pos = text_positions(ids.len(), cfg.d_model);
    let pos = tape.constant(&pos);
    let emb = tape.add(emb, pos)?;
    let modality = bound.get("modality_embed")?;
    let mrow = tape.slice(modality, 0, 0, 1)?;
    let mrow = tape.reshape(mrow, vec![cfg.d_model])?;
    Ok(tape.add_row(emb, mrow)?)
}

/// Patchify, project, and position-encode an image volume. `origin` is the
/// patch-grid offset of this volume inside the full canvas.
pub fn embed_image(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    grid: TensorRef,
    origin: (usize, usize),
) -> Result<TensorRef, ModelError> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 3 || shape[0] != CHANNELS {
        return Err(ModelError::Dimension {
            what: "image volume",
            expected: vec![CHANNELS, cfg.grid_side(), cfg.grid_side()],
            got: shape,
        });
    }
    let (h, w) = (shape[1], shape[2]);
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(ModelError::Dimension {
            what: "image extents vs patch size",
            expected: vec![cfg.patch_size],
            got: vec![h, w],
        });
    }
    let patches = tape.patchify(grid, cfg.patch_size)?;
    let w_proj = bound.get("patch_proj_w")?;
    let b_proj = bound.get("patch_proj_b")?;
    let emb = tape.matmul(patches, w_proj)?;
    let emb = tape.add_row(emb, b_proj)?;
    let (gh, gw) = (h / cfg.patch_size, w / cfg.patch_size);
    let pos = image_positions(gh, gw, origin, cfg.d_model);
    let pos = tape.constant(&pos);
    let emb = tape.add(emb, pos)?;
    let modality = bound.get("modality_embed")?;
    let mrow = tape.slice(modality, 0, 1, 1)?;
    let mrow = tape.reshape(mrow, vec![cfg.d_model])?;
    Ok(tape.add_row(emb, mrow)?)
}

/// Builds the joint text-then-image sequence for one canvas (or sub-grid).
pub fn token_batch(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    ids: &[usize],
    grid: TensorRef,
    origin: (usize, usize),
) -> Result<TokenBatch, ModelError> {
    let text = embed_text(tape, cfg, bound, ids)?;
    let image = embed_image(tape, cfg, bound, grid, origin)?;
    let n_text = tape.shape(text)[0];
    let n_image = tape.shape(image)[0];
    let tokens = tape.concat(text, image, 0)?;
    let gw = tape.shape(grid)[2] / cfg.patch_size;
    let mut positions = Vec::with_capacity(n_text + n_image);
    for i in 0..n_text {
        positions.push([i as f32, -1.0]);
    }
    for i in 0..n_image {
        positions.push([
            (origin.1 + i % gw) as f32,
            (origin.0 + i / gw) as f32,
        ]);
    }
    Ok(TokenBatch { tokens, n_text, n_image, positions })
}

/// Adds a learned projection of each aligned depth patch onto the matching
/// image token; text tokens pass through untouched. With zero adapter
/// weights this is the identity.
pub fn apply_depth_adapter(
    tape: &mut Tape,
    cfg: &ModelConfig,
    adapter: &BoundAdapter,
    batch: &TokenBatch,
    depth: TensorRef,
) -> Result<TokenBatch, ModelError> {
    let shape = tape.shape(depth).to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(ModelError::Dimension {
            what: "depth volume",
            expected: vec![1, cfg.grid_side(), cfg.grid_side()],
            got: shape,
        });
    }
    let n_patches = (shape[1] / cfg.patch_size) * (shape[2] / cfg.patch_size);
    if n_patches != batch.n_image || shape[1] % cfg.patch_size != 0 || shape[2] % cfg.patch_size != 0 {
        return Err(ModelError::Dimension {
            what: "depth patches vs image tokens",
            expected: vec![batch.n_image],
            got: vec![n_patches],
        });
    }
    let patches = tape.patchify(depth, cfg.patch_size)?;
    let w = adapter.get("depth_adapter_w")?;
    let b = adapter.get("depth_adapter_b")?;
    let offset = tape.matmul(patches, w)?;
    let offset = tape.add_row(offset, b)?;
    let text = tape.slice(batch.tokens, 0, 0, batch.n_text)?;
    let image = tape.slice(batch.tokens, 0, batch.n_text, batch.n_image)?;
    let image = tape.add(image, offset)?;
    let tokens = tape.concat(text, image, 0)?;
    Ok(TokenBatch {
        tokens,
        n_text: batch.n_text,
        n_image: batch.n_image,
        positions: batch.positions.clone(),
    })
}

// ── Attention ────────────────────────────────────────────────────────────

/// Per-layer projected Q/K/V over the joint sequence plus the modality split
/// index (text rows come first).
pub struct LayerQkv {
    pub q: TensorRef,
    pub k: TensorRef,
    pub v: TensorRef,
}

pub struct AttentionState {
    pub layers: Vec<LayerQkv>,
    pub n_text: usize,
}

/// Multi-head scaled dot-product attention, heads split along the channel
/// axis, per-head scale 1/sqrt(head_dim). Returns the concatenated head
/// outputs (no output projection) and the per-head weight matrices.
pub fn attend_heads(
    tape: &mut Tape,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
    n_heads: usize,
) -> Result<(TensorRef, Vec<TensorRef>), ModelError> {
    let d = tape.shape(q)[1];
    assert!(n_heads >= 1 && d % n_heads == 0);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out: Option<TensorRef> = None;
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let w = tape.softmax_rows(scores)?;
        weights.push(w);
        let oh = tape.matmul(w, vh)?;
        out = Some(match out {
            None => oh,
            Some(acc) => tape.concat(acc, oh, 1)?,
        });
    }
    Ok((out.unwrap(), weights))
}

pub fn attend(
    tape: &mut Tape,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
    n_heads: usize,
) -> Result<TensorRef, ModelError> {
    Ok(attend_heads(tape, q, k, v, n_heads)?.0)
}

fn linear(
    tape: &mut Tape,
    x: TensorRef,
    w: TensorRef,
    b: Option<TensorRef>,
) -> Result<TensorRef, TensorError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Base linear with the optional low-rank delta routed through the factored
/// form x*down*up, which never materializes the full delta matrix.
fn linear_lora(
    tape: &mut Tape,
    x: TensorRef,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    wname: &str,
    bname: &str,
) -> Result<TensorRef, ModelError> {
    let w = bound.get(wname)?;
    let b = bound.get(bname)?;
    let mut y = tape.matmul(x, w)?;
    if let Some(a) = adapter {
        if let Some((down, up)) = a.lora_pair(wname) {
            let xd = tape.matmul(x, down)?;
            let xdu = tape.matmul(xd, up)?;
            let delta = tape.scale(xdu, a.scaling)?;
            y = tape.add(y, delta)?;
        }
    }
    Ok(tape.add_row(y, b)?)
}

/// Recomputes one layer's attention output (with output projection) from a
/// captured state. The forward pass uses the same code path.
pub fn joint_attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    state: &AttentionState,
    layer: usize,
) -> Result<TensorRef, ModelError> {
    let qkv = &state.layers[layer];
    let a = attend(tape, qkv.q, qkv.k, qkv.v, cfg.n_heads)?;
    linear_lora(
        tape,
        a,
        bound,
        adapter,
        &format!("layer{layer}.attn_wo"),
        &format!("layer{layer}.attn_bo"),
    )
}

// ── Forward ──────────────────────────────────────────────────────────────

fn modulation_chunk(
    tape: &mut Tape,
    m: TensorRef,
    i: usize,
    d: usize,
) -> Result<TensorRef, TensorError> {
    let s = tape.slice(m, 1, i * d, d)?;
    tape.reshape(s, vec![d])
}

fn forward_impl(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    batch: &TokenBatch,
    t: usize,
    t_max: usize,
    capture: bool,
) -> Result<(TensorRef, Option<AttentionState>), ModelError> {
    if t > t_max {
        return Err(ModelError::Timestep { t, t_max });
    }
    let d = cfg.d_model;
    let n = batch.n_text + batch.n_image;
    if tape.shape(batch.tokens) != [n, d] {
        return Err(ModelError::Dimension {
            what: "token batch",
            expected: vec![n, d],
            got: tape.shape(batch.tokens).to_vec(),
        });
    }

    let e = timestep_embedding(t as f64, d);
    let e = tape.constant(&e);
    let e = linear(tape, e, bound.get("temb_w1")?, Some(bound.get("temb_b1")?))?;
    let e = tape.gelu(e)?;
    let e = linear(tape, e, bound.get("temb_w2")?, Some(bound.get("temb_b2")?))?;

    let mut x = batch.tokens;
    let mut layers = Vec::new();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let m = linear(tape, e, bound.get(&p("mod_w"))?, Some(bound.get(&p("mod_b"))?))?;
        let shift1 = modulation_chunk(tape, m, 0, d)?;
        let scale1 = modulation_chunk(tape, m, 1, d)?;
        let gate1 = modulation_chunk(tape, m, 2, d)?;
        let shift2 = modulation_chunk(tape, m, 3, d)?;
        let scale2 = modulation_chunk(tape, m, 4, d)?;
        let gate2 = modulation_chunk(tape, m, 5, d)?;

        let h = tape.layer_norm_rows(x, LN_EPS)?;
        let sc = tape.add_scalar(scale1, 1.0)?;
        let h = tape.mul_row(h, sc)?;
        let h = tape.add_row(h, shift1)?;
        let q = linear_lora(tape, h, bound, adapter, &p("attn_wq"), &p("attn_bq"))?;
        let k = linear_lora(tape, h, bound, adapter, &p("attn_wk"), &p("attn_bk"))?;
        let v = linear_lora(tape, h, bound, adapter, &p("attn_wv"), &p("attn_bv"))?;
        if capture {
            layers.push(LayerQkv { q, k, v });
        }
        let a = attend(tape, q, k, v, cfg.n_heads)?;
        let a = linear_lora(tape, a, bound, adapter, &p("attn_wo"), &p("attn_bo"))?;
        let a = tape.mul_row(a, gate1)?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm_rows(x, LN_EPS)?;
        let sc = tape.add_scalar(scale2, 1.0)?;
        let h = tape.mul_row(h, sc)?;
        let h = tape.add_row(h, shift2)?;
        let mlp = linear(tape, h, bound.get(&p("mlp_w1"))?, Some(bound.get(&p("mlp_b1"))?))?;
        let mlp = tape.gelu(mlp)?;
        let mlp = linear(tape, mlp, bound.get(&p("mlp_w2"))?, Some(bound.get(&p("mlp_b2"))?))?;
        let mlp = tape.mul_row(mlp, gate2)?;
        x = tape.add(x, mlp)?;
    }

    let img = tape.slice(x, 0, batch.n_text, batch.n_image)?;
    let img = tape.layer_norm_rows(img, LN_EPS)?;
    let out = linear(tape, img, bound.get("head_w")?, Some(bound.get("head_b")?))?;
    let state = capture.then_some(AttentionState { layers, n_text: batch.n_text });
    Ok((out, state))
}

/// Predicted noise for every image patch, shape [n_image, patch_dim]. Text
/// tokens influence the output only through joint attention.
pub fn mmdit_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    batch: &TokenBatch,
    t: usize,
    t_max: usize,
) -> Result<TensorRef, ModelError> {
    Ok(forward_impl(tape, cfg, bound, adapter, batch, t, t_max, false)?.0)
}

/// Forward plus the per-layer Q/K/V record. Capture is a pure observer: the
/// returned output is computed by the identical op sequence.
pub fn mmdit_forward_captured(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &Bound,
    adapter: Option<&BoundAdapter>,
    batch: &TokenBatch,
    t: usize,
    t_max: usize,
) -> Result<(TensorRef, AttentionState), ModelError> {
    let (out, state) = forward_impl(tape, cfg, bound, adapter, batch, t, t_max, true)?;
    Ok((out, state.expect("capture requested")))
}
