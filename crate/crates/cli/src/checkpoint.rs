//! Bit-exact training state persistence.
//!
//! A checkpoint is a flat list of named f32 tensors: magic `MVCK`, a format
//! version, an entry count, then each entry as name, rank, extents, and
//! little-endian payload, closed by a CRC32 of every preceding byte. Entries
//! are written in name order, so save, load, save reproduces the file
//! byte for byte.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use mvicl_core::diffusion::AdamW;
use mvicl_core::model::{AdapterParams, ModelConfig, Params};
use mvicl_core::tensor::Tensor;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {got:?}, expected {MAGIC:?}")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported format version {got}, this build reads {FORMAT_VERSION}")]
    Version { got: u32 },
    #[error("truncated checkpoint: wanted {need} bytes at offset {offset}, file ends at {len}")]
    Truncated { offset: usize, need: usize, len: usize },
    #[error("CRC mismatch at byte offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { offset: usize, stored: u32, computed: u32 },
    #[error("entry name at offset {offset} is not UTF-8")]
    BadName { offset: usize },
    #[error("duplicate entry name {name:?}")]
    Duplicate { name: String },
    #[error("{extra} bytes of trailing garbage after the CRC")]
    Trailing { extra: usize },
    #[error("checkpoint is missing entry {name:?}")]
    Missing { name: String },
    #[error("unexpected entry {name:?}")]
    Unexpected { name: String },
    #[error("entry {name:?} has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("entry {name:?} does not hold a valid model config: {reason}")]
    Config { name: String, reason: String },
}

/// IEEE CRC32, least-significant-bit first, as used by PNG and zip.
pub fn crc32(bytes: &[u8]) -> u32 {
    const POLY: u32 = 0xedb8_8320;
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc = table[((crc ^ u32::from(b)) & 0xff) as usize] ^ (crc >> 8);
    }
    !crc
}

pub fn encode(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                need: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { offset: 0, need: 4, len: bytes.len() });
    }
    let crc_offset = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[crc_offset..].try_into().unwrap());
    let computed = crc32(&bytes[..crc_offset]);
    if stored != computed {
        return Err(CheckpointError::Crc { offset: crc_offset, stored, computed });
    }
    let mut r = Reader { bytes: &bytes[..crc_offset], pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { got: magic.try_into().unwrap() });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { got: version });
    }
    let count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_offset = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName { offset: name_offset })?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(4 * numel)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.insert(name.clone(), Tensor::new(data, shape)).is_some() {
            return Err(CheckpointError::Duplicate { name });
        }
    }
    if r.pos != crc_offset {
        return Err(CheckpointError::Trailing { extra: crc_offset - r.pos });
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, encode(entries))?)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    decode(&std::fs::read(path)?)
}

// ── Training state ───────────────────────────────────────────────────────

/// Everything a run needs to continue exactly where it stopped: model
/// config, base weights, the adapter when fine-tuning, optimizer moments for
/// whichever parameter set trains, and the step counter.
pub struct TrainState {
    pub cfg: ModelConfig,
    pub base: Params,
    pub adapter: Option<AdapterParams>,
    pub opt_m: BTreeMap<String, Vec<f32>>,
    pub opt_v: BTreeMap<String, Vec<f32>>,
    pub opt_count: u64,
    pub step: usize,
}

const CONFIG_KEY: &str = "config.model";
const STEP_KEY: &str = "progress.step";
const OPT_COUNT_KEY: &str = "progress.opt_count";

impl TrainState {
    pub fn fresh(cfg: ModelConfig, base: Params, adapter: Option<AdapterParams>) -> Self {
        TrainState {
            cfg,
            base,
            adapter,
            opt_m: BTreeMap::new(),
            opt_v: BTreeMap::new(),
            opt_count: 0,
            step: 0,
        }
    }

    /// Optimizer with the saved moments restored.
    pub fn optimizer(&self, lr: f32) -> AdamW {
        let mut opt = AdamW::new(lr);
        opt.step_count = self.opt_count;
        opt.m = self.opt_m.clone();
        opt.v = self.opt_v.clone();
        opt
    }

    pub fn absorb_optimizer(&mut self, opt: &AdamW) {
        self.opt_count = opt.step_count;
        self.opt_m = opt.m.clone();
        self.opt_v = opt.v.clone();
    }

    pub fn to_entries(&self) -> BTreeMap<String, Tensor> {
        let c = &self.cfg;
        let cfg_vec = [
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.patch_size,
            c.vocab_size,
            c.lora_rank,
            c.image_side,
        ];
        let mut entries = BTreeMap::new();
        entries.insert(
            CONFIG_KEY.into(),
            Tensor::new(cfg_vec.iter().map(|&v| v as f32).collect(), vec![7]),
        );
        entries.insert(STEP_KEY.into(), Tensor::new(vec![self.step as f32], vec![1]));
        entries.insert(OPT_COUNT_KEY.into(), Tensor::new(vec![self.opt_count as f32], vec![1]));
        for (k, t) in &self.base.map {
            entries.insert(format!("base.{k}"), t.clone());
        }
        if let Some(a) = &self.adapter {
            for (k, t) in &a.map {
                entries.insert(format!("adapter.{k}"), t.clone());
            }
        }
        let trained: &BTreeMap<String, Tensor> = match &self.adapter {
            Some(a) => &a.map,
            None => &self.base.map,
        };
        for (k, m) in &self.opt_m {
            let shape = trained.get(k).map_or_else(|| vec![m.len()], |t| t.shape.clone());
            entries.insert(format!("opt_m.{k}"), Tensor::new(m.clone(), shape));
        }
        for (k, v) in &self.opt_v {
            let shape = trained.get(k).map_or_else(|| vec![v.len()], |t| t.shape.clone());
            entries.insert(format!("opt_v.{k}"), Tensor::new(v.clone(), shape));
        }
        entries
    }

    pub fn from_entries(
        mut entries: BTreeMap<String, Tensor>,
    ) -> Result<TrainState, CheckpointError> {
        let scalar = |entries: &mut BTreeMap<String, Tensor>,
                      key: &str|
         -> Result<f32, CheckpointError> {
            let t = entries.remove(key).ok_or(CheckpointError::Missing { name: key.into() })?;
            if t.shape != [1] {
                return Err(CheckpointError::Shape {
                    name: key.into(),
                    expected: vec![1],
                    got: t.shape,
                });
            }
            Ok(t.data[0])
        };
        let cfg_t = entries
            .remove(CONFIG_KEY)
            .ok_or(CheckpointError::Missing { name: CONFIG_KEY.into() })?;
        if cfg_t.shape != [7] {
            return Err(CheckpointError::Shape {
                name: CONFIG_KEY.into(),
                expected: vec![7],
                got: cfg_t.shape,
            });
        }
        let as_usize = |v: f32| -> Result<usize, CheckpointError> {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(CheckpointError::Config {
                    name: CONFIG_KEY.into(),
                    reason: format!("field {v} is not a nonnegative integer"),
                });
            }
            Ok(v as usize)
        };
        let cfg = ModelConfig {
            d_model: as_usize(cfg_t.data[0])?,
            n_layers: as_usize(cfg_t.data[1])?,
            n_heads: as_usize(cfg_t.data[2])?,
            patch_size: as_usize(cfg_t.data[3])?,
            vocab_size: as_usize(cfg_t.data[4])?,
            lora_rank: as_usize(cfg_t.data[5])?,
            image_side: as_usize(cfg_t.data[6])?,
        };
        cfg.validate().map_err(|e| CheckpointError::Config {
            name: CONFIG_KEY.into(),
            reason: e.to_string(),
        })?;
        let step = as_usize(scalar(&mut entries, STEP_KEY)?)?;
        let opt_count = as_usize(scalar(&mut entries, OPT_COUNT_KEY)?)? as u64;

        // Template parameter sets fix the expected names and shapes; every
        // template tensor must be overwritten exactly once.
        let mut base = Params::init(&cfg, 0);
        let has_adapter = entries.keys().any(|k| k.starts_with("adapter."));
        let mut adapter = has_adapter.then(|| AdapterParams::init(&cfg, 0));
        let mut awaited: std::collections::BTreeSet<String> = base
            .map
            .keys()
            .map(|k| format!("base.{k}"))
            .chain(adapter.iter().flat_map(|a| a.map.keys().map(|k| format!("adapter.{k}"))))
            .collect();

        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for (name, t) in entries {
            let map = if let Some(k) = name.strip_prefix("opt_m.") {
                opt_m.insert(k.to_owned(), t.data);
                continue;
            } else if let Some(k) = name.strip_prefix("opt_v.") {
                opt_v.insert(k.to_owned(), t.data);
                continue;
            } else if name.starts_with("base.") {
                &mut base.map
            } else if name.starts_with("adapter.") {
                &mut adapter.as_mut().expect("adapter prefix implies adapter").map
            } else {
                return Err(CheckpointError::Unexpected { name });
            };
            let key = name.split_once('.').expect("prefixed name").1;
            let slot = map
                .get_mut(key)
                .ok_or_else(|| CheckpointError::Unexpected { name: name.clone() })?;
            if slot.shape != t.shape {
                return Err(CheckpointError::Shape {
                    name,
                    expected: slot.shape.clone(),
                    got: t.shape,
                });
            }
            *slot = t;
            awaited.remove(&name);
        }
        if let Some(name) = awaited.into_iter().next() {
            return Err(CheckpointError::Missing { name });
        }
        let trained: Vec<(&String, usize)> = match &adapter {
            Some(a) => a.map.iter().map(|(k, t)| (k, t.data.len())).collect(),
            None => base.map.iter().map(|(k, t)| (k, t.data.len())).collect(),
        };
        for (k, len) in trained {
            for (label, map) in [("opt_m", &opt_m), ("opt_v", &opt_v)] {
                if let Some(m) = map.get(k) {
                    if m.len() != len {
                        return Err(CheckpointError::Shape {
                            name: format!("{label}.{k}"),
                            expected: vec![len],
                            got: vec![m.len()],
                        });
                    }
                }
            }
        }
        for k in opt_m.keys().chain(opt_v.keys()) {
            let known = match &adapter {
                Some(a) => a.map.contains_key(k),
                None => base.map.contains_key(k),
            };
            if !known {
                return Err(CheckpointError::Unexpected { name: format!("opt_m.{k}") });
            }
        }
        Ok(TrainState { cfg, base, adapter, opt_m, opt_v, opt_count, step })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        save(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<TrainState, CheckpointError> {
        Self::from_entries(load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_entries() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("alpha".to_owned(), Tensor::new(vec![1.0, -2.5, 3.25], vec![3]));
        m.insert("beta.w".to_owned(), Tensor::new(vec![0.5; 6], vec![2, 3]));
        m
    }

    #[test]
    fn crc32_matches_the_png_reference_vector() {
        // Published IEEE CRC32 of the ASCII bytes "123456789".
        assert_eq!(crc32(b"123456789"), 0xcbf4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let entries = small_entries();
        save(&p1, &entries).unwrap();
        let loaded = load(&p1).unwrap();
        save(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn a_flipped_byte_reports_the_crc_offset() {
        let mut bytes = encode(&small_entries());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match decode(&bytes) {
            Err(CheckpointError::Crc { offset, stored, computed }) => {
                assert_eq!(offset, bytes.len() - 4);
                assert_ne!(stored, computed);
            }
            other => panic!("expected CRC error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let entries = small_entries();
        let mut bytes = encode(&entries);
        bytes[0] = b'X';
        let fixed = crc32(&bytes[..bytes.len() - 4]).to_le_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&fixed);
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic { .. })));

        let mut bytes = encode(&entries);
        bytes[4] = 9;
        let fixed = crc32(&bytes[..bytes.len() - 4]).to_le_bytes();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&fixed);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Version { got: 9 })));
    }

    #[test]
    fn truncation_names_the_offset() {
        let bytes = encode(&small_entries());
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode(cut), Err(CheckpointError::Crc { .. } | CheckpointError::Truncated { .. })));
    }

    #[test]
    fn train_state_survives_a_round_trip() {
        let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, image_side: 8, ..ModelConfig::default() };
        let base = Params::init(&cfg, 3);
        let adapter = AdapterParams::init_generic(&cfg, 4, 0.02);
        let mut st = TrainState::fresh(cfg, base, Some(adapter));
        st.step = 17;
        st.opt_count = 17;
        let name = st.adapter.as_ref().unwrap().map.keys().next().unwrap().clone();
        let len = st.adapter.as_ref().unwrap().map[&name].data.len();
        st.opt_m.insert(name.clone(), vec![0.25; len]);
        st.opt_v.insert(name, vec![0.125; len]);

        let back = TrainState::from_entries(st.to_entries()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.opt_count, 17);
        assert_eq!(back.base.fingerprint(), st.base.fingerprint());
        assert_eq!(
            back.adapter.as_ref().unwrap().fingerprint(),
            st.adapter.as_ref().unwrap().fingerprint()
        );
        assert_eq!(back.opt_m, st.opt_m);
        assert_eq!(back.opt_v, st.opt_v);
    }

    #[test]
    fn an_alien_entry_is_rejected() {
        let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, image_side: 8, ..ModelConfig::default() };
        let st = TrainState::fresh(cfg.clone(), Params::init(&cfg, 3), None);
        let mut entries = st.to_entries();
        entries.insert("visitor".into(), Tensor::new(vec![1.0], vec![1]));
        assert!(matches!(
            TrainState::from_entries(entries),
            Err(CheckpointError::Unexpected { .. })
        ));
    }

    #[test]
    fn a_missing_parameter_is_rejected() {
        let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, image_side: 8, ..ModelConfig::default() };
        let st = TrainState::fresh(cfg.clone(), Params::init(&cfg, 3), None);
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut entries = st.to_entries();
        let victim = entries.keys().find(|k| k.starts_with("base.")).unwrap().clone();
        entries.remove(&victim);
        save(&path, &entries).unwrap();
        assert!(matches!(
            TrainState::load(&path),
            Err(CheckpointError::Missing { name }) if name == victim
        ));
    }
}
