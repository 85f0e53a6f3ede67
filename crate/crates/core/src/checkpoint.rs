//! Bit-exact trainer snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DLSC" | version u32 | manifest length u64 | TOML manifest
//!        | payload length u64 | f64 payload | CRC32 of all preceding bytes
//! ```
//!
//! The manifest holds the config, counters, rng position and a directory
//! of named tensors (shape and element offset into the payload).

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::BatchSampler;
use crate::error::{Error, Result};
use crate::nets::{MlpSpec, NetworkParams};
use crate::tensor::Array;
use crate::trainer::{AdamState, StepRecord, TrainConfig, TrainHistory, Trainer};

pub const MAGIC: &[u8; 4] = b"DLSC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    step: u64,
    data_dim: usize,
    rows: usize,
    sampler_epoch: u64,
    sampler_cursor: usize,
    rng_seed: String,
    rng_stream: u64,
    /// u128, decimal.
    rng_word_pos: String,
    adam_steps: [u64; 3],
    history_terms: Vec<String>,
    config: TrainConfig,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

const NETS: [&str; 3] = ["g", "e", "d"];

fn nets(t: &Trainer) -> [&NetworkParams; 3] {
    [&t.g, &t.e, &t.d]
}

fn adams(t: &Trainer) -> [&AdamState; 3] {
    [&t.adam_g, &t.adam_e, &t.adam_d]
}

fn specs(config: &TrainConfig, data_dim: usize) -> [MlpSpec; 3] {
    [
        config.generator_spec(data_dim),
        config.encoder_spec(data_dim),
        config.discriminator_spec(data_dim),
    ]
}

/// Serializes the full trainer state.
pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Array)> = Vec::new();
    for ((net, params), adam) in NETS.iter().zip(nets(t)).zip(adams(t)) {
        for (name, a) in params.names.iter().zip(&params.tensors) {
            tensors.push((format!("{net}/{name}"), a));
        }
        for (name, a) in params.names.iter().zip(&adam.m) {
            tensors.push((format!("adam_m.{net}/{name}"), a));
        }
        for (name, a) in params.names.iter().zip(&adam.v) {
            tensors.push((format!("adam_v.{net}/{name}"), a));
        }
    }
    let terms: Vec<String> = t
        .history
        .records
        .first()
        .map(|r| r.losses.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut values = Vec::with_capacity(t.history.len() * terms.len());
    let mut meta = Vec::with_capacity(t.history.len() * 2);
    for r in &t.history.records {
        let names: Vec<&String> = r.losses.iter().map(|(n, _)| n).collect();
        if names.len() != terms.len() || names.iter().zip(&terms).any(|(a, b)| *a != b) {
            return Err(Error::Usage(format!("history step {} has a different term set", r.step)));
        }
        values.extend(r.losses.iter().map(|(_, v)| *v));
        meta.push(r.step as f64);
        meta.push(r.seconds);
    }
    let hist_values = Array::new(vec![t.history.len(), terms.len()], values)?;
    let hist_meta = Array::new(vec![t.history.len(), 2], meta)?;
    tensors.push(("history/values".into(), &hist_values));
    tensors.push(("history/meta".into(), &hist_meta));

    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, a) in &tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset,
        });
        offset += a.len();
        for v in a.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        step: t.step,
        data_dim: t.data_dim,
        rows: t.sampler.rows(),
        sampler_epoch: t.sampler.epoch(),
        sampler_cursor: t.sampler.cursor(),
        rng_seed: t.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        rng_stream: t.rng.get_stream(),
        rng_word_pos: t.rng.get_word_pos().to_string(),
        adam_steps: [t.adam_g.t, t.adam_e.t, t.adam_d.t],
        history_terms: terms,
        config: t.config.clone(),
        tensors: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format("manifest", e.to_string()))?;

    let mut out = Vec::with_capacity(32 + text.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes via a temporary sibling file and rename.
pub fn save_checkpoint(path: impl AsRef<Path>, t: &Trainer) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(t)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(field, "file truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let mlen = c.u64("manifest_length")?;
    let text = c.take(usize::try_from(mlen).unwrap_or(usize::MAX), "manifest_length")?;
    let plen = c.u64("payload_length")?;
    let payload = c.take(usize::try_from(plen).unwrap_or(usize::MAX), "payload_length")?;
    let stored = c.take(4, "checksum")?;
    if c.at != bytes.len() {
        return Err(Error::format("payload_length", "trailing bytes after checksum"));
    }
    let crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if crc.to_le_bytes() != stored {
        return Err(Error::format("checksum", "CRC32 mismatch"));
    }
    if payload.len() % 8 != 0 {
        return Err(Error::format("payload_length", "not a whole number of f64 values"));
    }
    let text = std::str::from_utf8(text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let m: Manifest = toml::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))?;
    m.config.validate().map_err(|e| Error::format("config", e.to_string()))?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();

    let tensor = |name: &str, shape: &[usize]| -> Result<Array> {
        let field = format!("tensor {name}");
        let e = m
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::format(&field, "missing"))?;
        if e.shape != shape {
            return Err(Error::format(&field, format!("shape {:?}, expected {shape:?}", e.shape)));
        }
        let n: usize = shape.iter().product();
        let data = values
            .get(e.offset..e.offset.saturating_add(n))
            .ok_or_else(|| Error::format(&field, "offset outside payload"))?;
        Array::new(shape.to_vec(), data.to_vec())
    };

    let mut params = Vec::new();
    let mut states = Vec::new();
    for ((net, spec), t) in NETS.iter().zip(specs(&m.config, m.data_dim)).zip(m.adam_steps) {
        let layout = spec.layout();
        let read = |prefix: &str| -> Result<Vec<Array>> {
            layout.iter().map(|(name, shape)| tensor(&format!("{prefix}{net}/{name}"), shape)).collect()
        };
        let p = NetworkParams::from_parts(spec.clone(), read("")?)?;
        states.push(AdamState {
            t,
            m: read("adam_m.")?,
            v: read("adam_v.")?,
        });
        params.push(p);
    }

    let terms = &m.history_terms;
    let probe = |name: &str| m.tensors.iter().find(|e| e.name == name).map(|e| e.shape.first().copied().unwrap_or(0));
    let steps = probe("history/meta").ok_or_else(|| Error::format("tensor history/meta", "missing"))?;
    let hv = tensor("history/values", &[steps, terms.len()])?;
    let hm = tensor("history/meta", &[steps, 2])?;
    let history = TrainHistory {
        records: (0..steps)
            .map(|i| StepRecord {
                step: hm.get2(i, 0) as u64,
                losses: terms.iter().cloned().zip(hv.row(i).iter().copied()).collect(),
                seconds: hm.get2(i, 1),
            })
            .collect(),
    };

    let seed = parse_seed(&m.rng_seed)?;
    let word_pos: u128 = m
        .rng_word_pos
        .parse()
        .map_err(|_| Error::format("rng_word_pos", "not an unsigned integer"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(m.rng_stream);
    rng.set_word_pos(word_pos);

    let sampler = BatchSampler::resume(m.rows, m.config.batch_size, m.config.seed, m.sampler_epoch, m.sampler_cursor)
        .map_err(|e| Error::format("sampler", e.to_string()))?;
    let [g, e, d]: [NetworkParams; 3] = params.try_into().expect("three networks");
    let [ag, ae, ad]: [AdamState; 3] = states.try_into().expect("three optimizers");
    Ok(Trainer::from_parts(
        m.config,
        m.data_dim,
        [g, e, d],
        [ag, ae, ad],
        rng,
        sampler,
        m.step,
        history,
    ))
}

fn parse_seed(hex: &str) -> Result<[u8; 32]> {
    let bad = || Error::format("rng_seed", "expected 64 hex digits");
    if hex.len() != 64 || !hex.is_ascii() {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(seed)
}
