//! Checkpoint files: one JSON header line, a newline, then raw little-endian
//! `f64` blocks. Parameters come first in registry order, followed by the
//! Adam first and second moments of each parameter that has them.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, CvaeModel};
use crate::params::ParamRegistry;
use crate::tensor::Tensor;
use crate::train::{AdamState, Phase, PhaseState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Location of one block in the body, counted in `f64` elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<BlockEntry>,
    pub v: Vec<BlockEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub phase: Phase,
    pub step: u64,
    pub epochs_done: usize,
    pub seed: u64,
    /// Digest of the configuration that produced the trajectory.
    pub run_digest: u64,
    pub params: Vec<BlockEntry>,
    pub adam: AdamHeader,
    /// Length of the body in `f64` elements.
    pub body_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CvaeModel,
    pub state: PhaseState,
    pub seed: u64,
    pub run_digest: u64,
}

fn push_block(body: &mut Vec<f64>, name: &str, shape: &[usize], data: &[f64]) -> BlockEntry {
    let e = BlockEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset: body.len(),
        len: data.len(),
        trainable: None,
    };
    body.extend_from_slice(data);
    e
}

/// Serialise to bytes.
pub fn encode(model: &CvaeModel, state: &PhaseState, seed: u64, run_digest: u64) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut params = Vec::with_capacity(model.params.len());
    for (name, p) in model.params.iter() {
        let mut e = push_block(&mut body, name, p.value.shape(), p.value.data());
        e.trainable = Some(p.trainable);
        params.push(e);
    }
    let moments = |body: &mut Vec<f64>, map: &IndexMap<String, Vec<f64>>| -> Result<Vec<BlockEntry>> {
        map.iter()
            .map(|(name, data)| {
                let shape = model.params.value(name)?.shape().to_vec();
                Ok(push_block(body, name, &shape, data))
            })
            .collect()
    };
    let m = moments(&mut body, &state.adam.m)?;
    let v = moments(&mut body, &state.adam.v)?;
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: model.arch.clone(),
        phase: state.phase,
        step: state.step,
        epochs_done: state.epochs_done,
        seed,
        run_digest,
        params,
        adam: AdamHeader {
            lr: state.adam.lr,
            beta1: state.adam.beta1,
            beta2: state.adam.beta2,
            eps: state.adam.eps,
            t: state.adam.t,
            m,
            v,
        },
        body_len: body.len(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::ManifestCorrupt(e.to_string()))?;
    out.push(b'\n');
    out.reserve(body.len() * 8);
    for x in body {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn check_tiling(header: &CheckpointHeader, body_len: usize) -> Result<()> {
    let mut next = 0usize;
    let blocks = header.params.iter().chain(&header.adam.m).chain(&header.adam.v);
    for b in blocks {
        if b.offset != next {
            return Err(Error::ManifestCorrupt(format!(
                "block `{}` starts at {} but the previous block ends at {next}",
                b.name, b.offset
            )));
        }
        if b.shape.iter().product::<usize>() != b.len {
            return Err(Error::ManifestCorrupt(format!("block `{}` length disagrees with its shape", b.name)));
        }
        next += b.len;
    }
    if next != header.body_len || next != body_len {
        return Err(Error::ManifestCorrupt(format!(
            "blocks cover {next} values, header declares {}, body holds {body_len}",
            header.body_len
        )));
    }
    Ok(())
}

/// Parse bytes written by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::ManifestCorrupt("missing header line".into()))?;
    let head = &bytes[..nl];
    let probe: VersionProbe =
        serde_json::from_slice(head).map_err(|e| Error::ManifestCorrupt(e.to_string()))?;
    if probe.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: probe.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(head).map_err(|e| Error::ManifestCorrupt(e.to_string()))?;
    let raw = &bytes[nl + 1..];
    if raw.len() % 8 != 0 {
        return Err(Error::ManifestCorrupt(format!("body length {} is not a multiple of 8", raw.len())));
    }
    let body: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    check_tiling(&header, body.len())?;
    header.arch.validate()?;

    let slice = |b: &BlockEntry| body[b.offset..b.offset + b.len].to_vec();
    let mut params = ParamRegistry::new();
    for b in &header.params {
        params
            .insert(b.name.clone(), Tensor::new(&b.shape, slice(b))?)
            .map_err(|e| Error::ManifestCorrupt(e.to_string()))?;
        params.set_trainable(&b.name, b.trainable.unwrap_or(true))?;
    }
    let moments = |blocks: &[BlockEntry]| -> Result<IndexMap<String, Vec<f64>>> {
        blocks
            .iter()
            .map(|b| {
                let p = params
                    .value(&b.name)
                    .map_err(|_| Error::ManifestCorrupt(format!("moment for unknown parameter `{}`", b.name)))?;
                if p.shape() != b.shape.as_slice() {
                    return Err(Error::ManifestCorrupt(format!("moment shape mismatch for `{}`", b.name)));
                }
                Ok((b.name.clone(), slice(b)))
            })
            .collect()
    };
    let a = &header.adam;
    let adam = AdamState {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        t: a.t,
        m: moments(&a.m)?,
        v: moments(&a.v)?,
    };
    let model = CvaeModel::from_parts(header.arch.clone(), params)?;
    Ok(Checkpoint {
        model,
        state: PhaseState {
            phase: header.phase,
            epochs_done: header.epochs_done,
            step: header.step,
            adam,
        },
        seed: header.seed,
        run_digest: header.run_digest,
    })
}

/// Write atomically: the bytes go to a sibling temporary file that is then
/// renamed over `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &CvaeModel,
    state: &PhaseState,
    seed: u64,
    run_digest: u64,
) -> Result<()> {
    let bytes = encode(model, state, seed, run_digest)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 over the names, shapes and value bits of the parameters whose
/// names satisfy `f`, in registry order.
pub fn param_digest(params: &ParamRegistry, f: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for (name, p) in params.iter().filter(|(n, _)| f(n)) {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for x in p.value.data() {
            h.update(x.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    fn sample() -> (CvaeModel, PhaseState) {
        let model = CvaeModel::new(ArchConfig::tiny(2), 3).unwrap();
        let mut state = PhaseState::fresh(Phase::Vae, &TrainConfig::default());
        state.step = 7;
        state.epochs_done = 2;
        state.adam.t = 7;
        let w = model.params.value("seg_enc/mu/w").unwrap();
        state.adam.m.insert("seg_enc/mu/w".into(), vec![0.25; w.len()]);
        state.adam.v.insert("seg_enc/mu/w".into(), vec![f64::MIN_POSITIVE; w.len()]);
        (model, state)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (model, state) = sample();
        let bytes = encode(&model, &state, 11, 5).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.state, state);
        assert_eq!((ck.seed, ck.run_digest), (11, 5));
        assert_eq!(encode(&ck.model, &ck.state, 11, 5).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_version() {
        let (model, state) = sample();
        let bytes = encode(&model, &state, 0, 0).unwrap();
        let short = &bytes[..bytes.len() - 8];
        assert!(matches!(decode(short), Err(Error::ManifestCorrupt(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::ManifestCorrupt(_))));
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()])
            .replacen("\"format_version\":1", "\"format_version\":9", 1);
        let mut bad = text.into_bytes();
        bad.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap()..]);
        assert!(matches!(decode(&bad), Err(Error::FormatVersionMismatch { found: 9, expected: 1 })));
    }

    #[test]
    fn digest_sees_single_bit() {
        let (mut model, _) = sample();
        let before = param_digest(&model.params, |n| n.starts_with("seg_enc/"));
        let other = param_digest(&model.params, |n| n.starts_with("trunk/"));
        let x = &mut model.params.value_mut("seg_enc/mu/b").unwrap().data_mut()[0];
        *x = f64::from_bits(x.to_bits() ^ 1);
        assert_ne!(param_digest(&model.params, |n| n.starts_with("seg_enc/")), before);
        assert_eq!(param_digest(&model.params, |n| n.starts_with("trunk/")), other);
    }
}
