//! Low-rank adapters and the depth adapter: the only parameters that train
//! during in-context fine-tuning. Base weights stay frozen.

use super::{ModelConfig, ModelError};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorRef};
use std::collections::BTreeMap;

/// View of one adapted weight's delta. Effective delta = scaling * down * up;
/// with `up == 0` the adapted layer equals the base layer exactly.
pub struct LoraDelta<'a> {
    pub down: &'a Tensor,
    pub up: &'a Tensor,
    pub scaling: f32,
}

/// Every fine-tune-trainable tensor: per attention weight a down/up factor
/// pair, plus the additive depth-patch projection.
#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub map: BTreeMap<String, Tensor>,
    pub scaling: f32,
}

/// Attention projection weights that receive LoRA factors.
pub fn lora_target_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    for l in 0..cfg.n_layers {
        for w in ["attn_wq", "attn_wk", "attn_wv", "attn_wo"] {
            names.push(format!("layer{l}.{w}"));
        }
    }
    names
}

impl AdapterParams {
    /// Fine-tune start state: up factors and the depth projection are zero,
    /// so the adapted model computes exactly the base function.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        Self::build(cfg, seed, 0.02, true)
    }

    /// Every factor drawn from N(0, sigma); the adapted model differs from
    /// the base everywhere. Property tests only.
    pub fn init_generic(cfg: &ModelConfig, seed: u64, sigma: f32) -> Self {
        Self::build(cfg, seed, sigma, false)
    }

    fn build(cfg: &ModelConfig, seed: u64, sigma: f32, zero_up: bool) -> Self {
        let d = cfg.d_model;
        let r = cfg.lora_rank;
        let pd = cfg.patch_size * cfg.patch_size;
        let mut map = BTreeMap::new();
        let gauss = |name: &str, shape: Vec<usize>| {
            let n = shape.iter().product();
            let mut s = rng::stream(seed, name);
            let data = rng::normal_f32s(&mut s, n)
                .into_iter()
                .map(|v| v * sigma)
                .collect();
            Tensor::new(data, shape)
        };
        for base in lora_target_names(cfg) {
            let down = gauss(&format!("{base}.lora_down"), vec![d, r]);
            let up = if zero_up {
                Tensor::zeros(vec![r, d])
            } else {
                gauss(&format!("{base}.lora_up"), vec![r, d])
            };
            map.insert(format!("{base}.lora_down"), down);
            map.insert(format!("{base}.lora_up"), up);
        }
        let (dw, db) = if zero_up {
            (Tensor::zeros(vec![pd, d]), Tensor::zeros(vec![d]))
        } else {
            (gauss("depth_adapter_w", vec![pd, d]), gauss("depth_adapter_b", vec![d]))
        };
        map.insert("depth_adapter_w".into(), dw);
        map.insert("depth_adapter_b".into(), db);
        AdapterParams { map, scaling: 1.0 }
    }

    pub fn delta(&self, base_name: &str) -> Option<LoraDelta<'_>> {
        let down = self.map.get(&format!("{base_name}.lora_down"))?;
        let up = self.map.get(&format!("{base_name}.lora_up"))?;
        Some(LoraDelta { down, up, scaling: self.scaling })
    }

    /// Pushes every adapter tensor onto `tape`, as differentiation roots when
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapter {
        let map = self
            .map
            .iter()
            .map(|(k, v)| {
                let r = if trainable { tape.param(v) } else { tape.constant(v) };
                (k.clone(), r)
            })
            .collect();
        BoundAdapter { map, scaling: self.scaling }
    }

    /// Order-insensitive content hash; lets tests assert parameters did or
    /// did not change.
    pub fn fingerprint(&self) -> u64 {
        super::fingerprint_map(&self.map)
    }
}

/// Adapter tensors already recorded on a tape.
pub struct BoundAdapter {
    map: BTreeMap<String, TensorRef>,
    pub scaling: f32,
}

impl BoundAdapter {
    pub fn get(&self, name: &str) -> Result<TensorRef, ModelError> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam { name: name.to_string() })
    }

    pub fn lora_pair(&self, base_name: &str) -> Option<(TensorRef, TensorRef)> {
        let down = self.map.get(&format!("{base_name}.lora_down"))?;
        let up = self.map.get(&format!("{base_name}.lora_up"))?;
        Some((*down, *up))
    }

    pub fn refs(&self) -> impl Iterator<Item = (&String, TensorRef)> {
        self.map.iter().map(|(k, v)| (k, *v))
    }
}

/// Depth-adapter weight shapes depend only on patch size and width; exposed
/// so checkpoint code can validate entries without a model instance.
pub fn adapter_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut shapes = BTreeMap::new();
    for base in lora_target_names(cfg) {
        shapes.insert(format!("{base}.lora_down"), vec![cfg.d_model, cfg.lora_rank]);
        shapes.insert(format!("{base}.lora_up"), vec![cfg.lora_rank, cfg.d_model]);
    }
    shapes.insert(
        "depth_adapter_w".into(),
        vec![cfg.patch_size * cfg.patch_size, cfg.d_model],
    );
    shapes.insert("depth_adapter_b".into(), vec![cfg.d_model]);
    shapes
}
