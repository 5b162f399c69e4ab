//! Binary checkpoint container.
//!
//! Layout: magic `UNISOTCK`, u32 version, u32 entry count, then per entry a u32 name
//! length, the UTF-8 name, u8 dtype (0 = f64), u8 rank, u64 dims and the little-endian
//! payload. Model configuration travels as `meta.*` entries; allocation masks as
//! `alloc.*` entries.

use std::path::Path;

use log::warn;

use mmtrack::model::{AdapterPlacement, ModelConfig, Tracker};
use mmtrack::{Tensor, Tracker64};

use crate::error::{io_err, HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"UNISOTCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

pub type Entry = (String, Tensor<f64>);

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(HarnessError::Truncated(what.to_string())),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 8] = r.take(8, "magic")?.try_into().expect("8 bytes");
    if &magic != MAGIC {
        return Err(HarnessError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(HarnessError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let len = r.u32(&format!("entry {i} name length"))? as usize;
        let name = String::from_utf8(r.take(len, &format!("entry {i} name"))?.to_vec())
            .map_err(|_| HarnessError::Invalid(format!("entry {i} name is not UTF-8")))?;
        let dtype = r.u8(&format!("{name} dtype"))?;
        if dtype != DTYPE_F64 {
            return Err(HarnessError::Invalid(format!("{name}: unsupported dtype {dtype}")));
        }
        let rank = r.u8(&format!("{name} rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64(&format!("{name} dims"))? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| HarnessError::Invalid(format!("{name}: dims overflow")))?;
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| HarnessError::Truncated(name.clone()))?, &format!("{name} data"))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        entries.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != buf.len() {
        warn!("{} trailing bytes after the last checkpoint entry", buf.len() - r.pos);
    }
    Ok(entries)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(io_err(path))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    decode(&std::fs::read(path).map_err(io_err(path))?)
}

fn meta(model: &ModelConfig, adapters: bool) -> Vec<(&'static str, f64)> {
    let e = &model.encoder;
    let h = &model.head;
    vec![
        ("meta.dim", e.dim as f64),
        ("meta.heads", e.heads as f64),
        ("meta.shallow_layers", e.shallow_layers as f64),
        ("meta.deep_layers", e.deep_layers as f64),
        ("meta.patch", e.patch as f64),
        ("meta.template_size", e.template_size as f64),
        ("meta.search_size", e.search_size as f64),
        ("meta.max_text_len", e.max_text_len as f64),
        ("meta.vocab", e.vocab as f64),
        ("meta.channels", e.channels as f64),
        ("meta.mlp_ratio", e.mlp_ratio as f64),
        ("meta.ln_eps", e.ln_eps),
        ("meta.beta", h.beta),
        ("meta.inclusive", f64::from(u8::from(h.inclusive))),
        ("meta.head_tau", h.tau),
        ("meta.confidence_threshold", h.confidence_threshold),
        ("meta.update_interval", h.update_interval.unwrap_or(0) as f64),
        ("meta.memory_capacity", h.memory_capacity as f64),
        ("meta.rank", model.adapter_rank as f64),
        ("meta.adapter_placement", f64::from(u8::from(model.adapter_placement == AdapterPlacement::AllLayers))),
        ("meta.adapters", f64::from(u8::from(adapters))),
    ]
}

/// Serializes a tracker, plus per-block shared-tuple masks when ranks were allocated.
pub fn tracker_entries(tracker: &Tracker64, shared_masks: Option<&[Vec<bool>]>) -> Vec<Entry> {
    let mut out: Vec<Entry> = meta(&tracker.cfg, tracker.has_adapters())
        .into_iter()
        .map(|(k, v)| (k.to_string(), Tensor::vector(vec![v])))
        .collect();
    for id in tracker.store.ids() {
        out.push((tracker.store.name(id).to_string(), tracker.store.get(id).clone()));
    }
    if let Some(masks) = shared_masks {
        for (ids, m) in tracker.adapters.iter().zip(masks) {
            let v = m.iter().map(|&b| f64::from(u8::from(b))).collect();
            out.push((format!("alloc.{}.shared", ids.prefix()), Tensor::vector(v)));
        }
    }
    out
}

pub fn save_tracker(path: &Path, tracker: &Tracker64, shared_masks: Option<&[Vec<bool>]>) -> Result<()> {
    write_entries(path, &tracker_entries(tracker, shared_masks))
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub tracker: Tracker64,
    pub shared_masks: Option<Vec<Vec<bool>>>,
    /// Entries the current model does not know about.
    pub warnings: Vec<String>,
}

fn model_from_meta(get: &dyn Fn(&str) -> Option<f64>) -> Result<(ModelConfig, bool)> {
    let mut m = ModelConfig::default();
    let need = |k: &str| get(k).ok_or_else(|| HarnessError::Incompatible(format!("missing {k}")));
    let u = |k: &str| need(k).map(|v| v as usize);
    let e = &mut m.encoder;
    e.dim = u("meta.dim")?;
    e.heads = u("meta.heads")?;
    e.shallow_layers = u("meta.shallow_layers")?;
    e.deep_layers = u("meta.deep_layers")?;
    e.patch = u("meta.patch")?;
    e.template_size = u("meta.template_size")?;
    e.search_size = u("meta.search_size")?;
    e.max_text_len = u("meta.max_text_len")?;
    e.vocab = u("meta.vocab")?;
    e.channels = u("meta.channels")?;
    e.mlp_ratio = u("meta.mlp_ratio")?;
    e.ln_eps = need("meta.ln_eps")?;
    let h = &mut m.head;
    h.beta = need("meta.beta")?;
    h.inclusive = need("meta.inclusive")? != 0.0;
    h.tau = need("meta.head_tau")?;
    h.confidence_threshold = need("meta.confidence_threshold")?;
    h.update_interval = Some(u("meta.update_interval")?).filter(|&v| v > 0);
    h.memory_capacity = u("meta.memory_capacity")?;
    m.adapter_rank = u("meta.rank")?;
    m.adapter_placement = if need("meta.adapter_placement")? != 0.0 {
        AdapterPlacement::AllLayers
    } else {
        AdapterPlacement::DeepOnly
    };
    Ok((m, need("meta.adapters")? != 0.0))
}

/// Rebuilds a tracker from checkpoint entries. Every model parameter must be present
/// with a matching shape; unrecognized entries are reported as warnings.
pub fn tracker_from_entries(entries: Vec<Entry>) -> Result<Loaded> {
    let scalar = |k: &str| entries.iter().find(|(n, _)| n == k).and_then(|(_, t)| t.data().first().copied());
    let (cfg, adapters) = model_from_meta(&scalar)?;
    let mut tracker = Tracker::new(cfg, 0)?;
    if adapters {
        tracker.attach_adapters(0);
    }
    let known_meta: Vec<&str> = meta(&tracker.cfg, adapters).into_iter().map(|(k, _)| k).collect();
    let mut seen = vec![false; tracker.store.len()];
    let mut masks: Vec<Option<Vec<bool>>> = vec![None; tracker.adapters.len()];
    let mut warnings = Vec::new();
    for (name, t) in entries {
        if known_meta.contains(&name.as_str()) {
            continue;
        }
        if let Some(id) = tracker.store.id(&name) {
            if tracker.store.get(id).dims() != t.dims() {
                return Err(HarnessError::Incompatible(format!(
                    "{name}: shape {:?} vs model {:?}",
                    t.dims(),
                    tracker.store.get(id).dims()
                )));
            }
            *tracker.store.get_mut(id) = t;
            seen[id.0] = true;
        } else if let Some(k) = tracker.adapters.iter().position(|a| name == format!("alloc.{}.shared", a.prefix())) {
            masks[k] = Some(t.data().iter().map(|&v| v != 0.0).collect());
        } else {
            warn!("ignoring unknown checkpoint entry {name}");
            warnings.push(name);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(HarnessError::Incompatible(format!(
            "parameter {} missing",
            tracker.store.name(mmtrack::params::ParamId(i))
        )));
    }
    let shared_masks = masks.iter().all(Option::is_some).then(|| masks.into_iter().flatten().collect::<Vec<_>>());
    Ok(Loaded {
        tracker,
        shared_masks: shared_masks.filter(|m| !m.is_empty()),
        warnings,
    })
}

pub fn load_tracker(path: &Path) -> Result<Loaded> {
    tracker_from_entries(read_entries(path)?)
}
