//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, JSON
//! header, little-endian `f64` payload (parameter groups in order, then the
//! key encoder and queue when present), and a SHA-256 trailer over every
//! preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::ContrastiveForm;
use crate::model::params::ParamGroup;
use crate::model::{DetectorParams, Group, ModelConfig, TensorSpec};
use crate::moco::{KeyQueue, MoCoState};

pub const MAGIC: &[u8; 8] = b"SEGPRECK";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const TRAILER: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: DetectorParams,
    pub moco: Option<MoCoState>,
    pub config: Option<TrainConfig>,
    /// Free-form metadata (phase, arm, dataset hashes).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct GroupHeader {
    name: Group,
    specs: Vec<TensorSpec>,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct MocoHeader {
    tau: f64,
    momentum: f64,
    form: ContrastiveForm,
    dim: usize,
    capacity: usize,
    fill: usize,
    cursor: usize,
    key_backbone_len: usize,
    key_projection_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step_count: u64,
    groups: Vec<GroupHeader>,
    moco: Option<MocoHeader>,
    config: Option<TrainConfig>,
    meta: serde_json::Value,
}

fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let groups = Group::ALL
        .iter()
        .map(|&g| GroupHeader {
            name: g,
            specs: ck.params.group(g).specs.clone(),
            len: ck.params.values(g).len(),
        })
        .collect();
    let moco = ck.moco.as_ref().map(|m| MocoHeader {
        tau: m.tau,
        momentum: m.momentum,
        form: m.form,
        dim: m.queue.dim(),
        capacity: m.queue.capacity(),
        fill: m.queue.fill(),
        cursor: m.queue.cursor(),
        key_backbone_len: m.key_backbone.len(),
        key_projection_len: m.key_projection.len(),
    });
    let header = Header {
        model: ck.model,
        step_count: ck.params.step_count,
        groups,
        moco,
        config: ck.config.clone(),
        meta: ck.meta.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(PREFIX + header.len() + 8 * ck.params.num_params() + TRAILER);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    let mut put = |vals: &[f64]| vals.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    for g in Group::ALL {
        put(ck.params.values(g));
    }
    if let Some(m) = &ck.moco {
        put(&m.key_backbone);
        put(&m.key_projection);
        put(m.queue.raw());
    }
    let hash = Sha256::digest(&buf);
    buf.extend_from_slice(&hash);
    Ok(buf)
}

/// Writes the checkpoint atomically and returns its SHA-256 content hash.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<String> {
    let bytes = encode(ck)?;
    let hash = hex::encode(&bytes[bytes.len() - TRAILER..]);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(hash)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = self
            .pos
            .checked_add(n.checked_mul(8).ok_or_else(|| Error::Corrupt("payload size overflow".into()))?)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("payload shorter than the header describes".into()))?;
        let out = self.buf[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos = end;
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Content hash stored in a checkpoint's trailer, verified.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)?;
    Ok(hex::encode(&bytes[bytes.len() - TRAILER..]))
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("missing checkpoint magic".into()));
    }
    if bytes.len() < PREFIX + TRAILER {
        return Err(Error::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Corrupt("content hash mismatch (truncated or modified file)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Corrupt("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&body[PREFIX..header_end])
        .map_err(|e| Error::Corrupt(format!("unreadable header: {e}")))?;
    let mut rd = Reader {
        buf: body,
        pos: header_end,
    };
    if header.groups.len() != Group::ALL.len() || header.groups.iter().zip(Group::ALL).any(|(h, g)| h.name != g) {
        return Err(Error::Corrupt("parameter groups missing or out of order".into()));
    }
    let mut groups: [ParamGroup; 4] = Default::default();
    for (slot, gh) in groups.iter_mut().zip(header.groups) {
        *slot = ParamGroup {
            values: rd.f64s(gh.len)?,
            specs: gh.specs,
        };
    }
    let params = DetectorParams::from_groups(groups, header.step_count).map_err(|e| Error::Corrupt(e.to_string()))?;
    let moco = match header.moco {
        None => None,
        Some(m) => {
            let key_backbone = rd.f64s(m.key_backbone_len)?;
            let key_projection = rd.f64s(m.key_projection_len)?;
            let raw = rd.f64s(m.dim.saturating_mul(m.capacity))?;
            let queue = KeyQueue::from_parts(m.dim, m.capacity, raw, m.fill, m.cursor).map_err(|e| Error::Corrupt(e.to_string()))?;
            Some(MoCoState {
                key_backbone,
                key_projection,
                queue,
                tau: m.tau,
                momentum: m.momentum,
                form: m.form,
            })
        }
    };
    if rd.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after payload".into()));
    }
    Ok(Checkpoint {
        model: header.model,
        params,
        moco,
        config: header.config,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Detector;
    use crate::moco::MoCoConfig;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::default();
        let (_, mut params) = Detector::init(cfg, 3).unwrap();
        params.step_count = 17;
        let mc = MoCoConfig {
            queue_size: 8,
            ..MoCoConfig::default()
        };
        let mut moco = MoCoState::new(&params, cfg.proj_dim, &mc).unwrap();
        let mut k = vec![0.0; 16];
        k[2] = 1.0;
        moco.enqueue(&[k]).unwrap();
        Checkpoint {
            model: cfg,
            params,
            moco: Some(moco),
            config: Some(TrainConfig::default()),
            meta: serde_json::json!({"phase": "test"}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        let h1 = save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        for g in Group::ALL {
            let a: Vec<u64> = ck.params.values(g).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params.values(g).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let h2 = save_checkpoint(&back, &dir.path().join("b.ckpt")).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(checkpoint_hash(&path).unwrap(), h1);
    }

    #[test]
    fn truncation_is_reported_as_corruption() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 5, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
    }

    #[test]
    fn future_version_names_both_versions() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn flipped_byte_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }
}
