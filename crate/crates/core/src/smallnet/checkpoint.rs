//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  b"ADNETCK1"
//! version  u32
//! n_meta   u32      then per entry: key_len u32, key bytes, val_len u32, val bytes
//! n_secs   u32      then per section:
//!   name_len u32, name bytes
//!   input_dim u32
//!   n_layers u32    then per layer: tag u32 (0 affine / 1 tanh / 2 cond-norm), a u32, b u32
//!   n_params u64, then n_params f64 values (IEEE-754 bits, little-endian)
//! ```
//!
//! Metadata keys are written sorted, so identical content produces identical
//! bytes and parameter values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{LayerSpec, NetError, SmallNet};

const MAGIC: &[u8; 8] = b"ADNETCK1";
const VERSION: u32 = 1;

/// One named parameter block. `layers` empty with `input_dim` 0 denotes a
/// raw array section (used by the tabular predictor).
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub input_dim: u32,
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
}

impl Section {
    pub fn from_net(name: &str, net: &SmallNet) -> Self {
        Self {
            name: name.to_string(),
            input_dim: net.input_dim() as u32,
            layers: net.layers().to_vec(),
            params: net.params().to_vec(),
        }
    }

    pub fn raw(name: &str, params: Vec<f64>) -> Self {
        Self { name: name.to_string(), input_dim: 0, layers: Vec::new(), params }
    }

    pub fn to_net(&self) -> Result<SmallNet, NetError> {
        if self.layers.is_empty() {
            return Err(NetError::Checkpoint(format!(
                "section '{}' is a raw array, not a network",
                self.name
            )));
        }
        let expect: usize = self.layers.iter().map(|l| l.param_count()).sum();
        if expect != self.params.len() {
            return Err(NetError::Checkpoint(format!(
                "section '{}': {} parameters, layers need {expect}",
                self.name,
                self.params.len()
            )));
        }
        Ok(SmallNet::from_parts(self.input_dim as usize, self.layers.clone(), self.params.clone()))
    }
}

fn layer_code(layer: &LayerSpec) -> (u32, u32, u32) {
    match *layer {
        LayerSpec::Affine { inputs, outputs } => (0, inputs as u32, outputs as u32),
        LayerSpec::Tanh => (1, 0, 0),
        LayerSpec::CondLayerNorm { dim, conditions } => (2, dim as u32, conditions as u32),
    }
}

fn decode_layer(tag: u32, a: u32, b: u32) -> Result<LayerSpec, NetError> {
    match tag {
        0 => Ok(LayerSpec::Affine { inputs: a as usize, outputs: b as usize }),
        1 => Ok(LayerSpec::Tanh),
        2 => Ok(LayerSpec::CondLayerNorm { dim: a as usize, conditions: b as usize }),
        other => Err(NetError::Checkpoint(format!("unknown layer tag {other}"))),
    }
}

/// Serialize metadata and sections to a file.
pub fn save(
    path: &Path,
    meta: &BTreeMap<String, String>,
    sections: &[Section],
) -> Result<(), NetError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        write_str(&mut buf, k);
        write_str(&mut buf, v);
    }
    buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for sec in sections {
        write_str(&mut buf, &sec.name);
        buf.extend_from_slice(&sec.input_dim.to_le_bytes());
        buf.extend_from_slice(&(sec.layers.len() as u32).to_le_bytes());
        for layer in &sec.layers {
            let (tag, a, b) = layer_code(layer);
            buf.extend_from_slice(&tag.to_le_bytes());
            buf.extend_from_slice(&a.to_le_bytes());
            buf.extend_from_slice(&b.to_le_bytes());
        }
        buf.extend_from_slice(&(sec.params.len() as u64).to_le_bytes());
        for p in &sec.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint, validating magic and version.
pub fn load(path: &Path) -> Result<(BTreeMap<String, String>, Vec<Section>), NetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let magic = take(&bytes, &mut at, 8)?;
    if magic != MAGIC {
        return Err(NetError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&bytes, &mut at)?;
    if version != VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {version}")));
    }
    let n_meta = read_u32(&bytes, &mut at)? as usize;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = read_str(&bytes, &mut at)?;
        let v = read_str(&bytes, &mut at)?;
        meta.insert(k, v);
    }
    let n_secs = read_u32(&bytes, &mut at)? as usize;
    let mut sections = Vec::with_capacity(n_secs);
    for _ in 0..n_secs {
        let name = read_str(&bytes, &mut at)?;
        let input_dim = read_u32(&bytes, &mut at)?;
        let n_layers = read_u32(&bytes, &mut at)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let tag = read_u32(&bytes, &mut at)?;
            let a = read_u32(&bytes, &mut at)?;
            let b = read_u32(&bytes, &mut at)?;
            layers.push(decode_layer(tag, a, b)?);
        }
        let n_params = read_u64(&bytes, &mut at)? as usize;
        let raw = take(&bytes, &mut at, n_params.checked_mul(8).ok_or_else(overflow)?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        sections.push(Section { name, input_dim, layers, params });
    }
    if at != bytes.len() {
        return Err(NetError::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, sections))
}

fn overflow() -> NetError {
    NetError::Checkpoint("size overflow".into())
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize) -> Result<&'a [u8], NetError> {
    if *at + len > bytes.len() {
        return Err(NetError::Checkpoint("truncated file".into()));
    }
    let out = &bytes[*at..*at + len];
    *at += len;
    Ok(out)
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32, NetError> {
    Ok(u32::from_le_bytes(take(bytes, at, 4)?.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], at: &mut usize) -> Result<u64, NetError> {
    Ok(u64::from_le_bytes(take(bytes, at, 8)?.try_into().unwrap()))
}

fn read_str(bytes: &[u8], at: &mut usize) -> Result<String, NetError> {
    let len = read_u32(bytes, at)? as usize;
    String::from_utf8(take(bytes, at, len)?.to_vec())
        .map_err(|_| NetError::Checkpoint("invalid utf-8".into()))
}
