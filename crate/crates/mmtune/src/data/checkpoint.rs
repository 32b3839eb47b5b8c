//! Bit-exact model persistence.
//!
//! Layout: magic `ABRICKPT` (8 bytes), little-endian u32 header length, a JSON
//! manifest `{version, kind, tensors: [{name, shape, tag}], bn_meta,
//! checksum}`, then every tensor as little-endian f32 in manifest order.
//! Training runs in f64 and narrows on save; loading re-widens, so a second
//! save of a loaded model is byte-identical to the first file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::model::{BnMeta, Encoder, ModelConfig, MultiModalModel, UniModalModel};

pub const MAGIC: &[u8; 8] = b"ABRICKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Unimodal {
        config: ModelConfig,
        modality: Modality,
    },
    Multimodal {
        config_a: ModelConfig,
        config_v: ModelConfig,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: CheckpointKind,
    pub tensors: Vec<TensorEntry>,
    pub bn_meta: BTreeMap<String, BnMeta>,
    /// Hex SHA-256 of the payload bytes.
    pub checksum: String,
}

/// A loaded or saveable model together with its kind.
#[derive(Debug, Clone)]
pub enum ModelCheckpoint {
    Unimodal {
        model: UniModalModel,
        modality: Modality,
    },
    Multimodal {
        model: MultiModalModel,
    },
}

impl ModelCheckpoint {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelCheckpoint::Unimodal { .. } => "unimodal",
            ModelCheckpoint::Multimodal { .. } => "multimodal",
        }
    }
}

fn collect_tensors(ckpt: &ModelCheckpoint) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: String, tag: &'static str, shape: Vec<usize>, data: &[f64]| {
        entries.push(TensorEntry {
            name,
            shape,
            tag: tag.to_string(),
        });
        for &v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    match ckpt {
        ModelCheckpoint::Unimodal { model, .. } => model.visit_tensors(&mut push),
        ModelCheckpoint::Multimodal { model } => model.visit_tensors(&mut push),
    }
    (entries, payload)
}

fn collect_bn_meta(ckpt: &ModelCheckpoint) -> BTreeMap<String, BnMeta> {
    match ckpt {
        ModelCheckpoint::Unimodal { model, .. } => model.encoder.bn_meta("encoder."),
        ModelCheckpoint::Multimodal { model } => {
            let mut m = model.encoder_a.bn_meta("enc_a.");
            m.extend(model.encoder_v.bn_meta("enc_v."));
            m
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Serialize a checkpoint to bytes.
pub fn checkpoint_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let (tensors, payload) = collect_tensors(ckpt);
    let manifest = Manifest {
        version: VERSION,
        kind: match ckpt {
            ModelCheckpoint::Unimodal { model, modality } => CheckpointKind::Unimodal {
                config: model.encoder.config.clone(),
                modality: *modality,
            },
            ModelCheckpoint::Multimodal { model } => CheckpointKind::Multimodal {
                config_a: model.encoder_a.config.clone(),
                config_v: model.encoder_v.config.clone(),
            },
        },
        tensors,
        bn_meta: collect_bn_meta(ckpt),
        checksum: sha256_hex(&payload),
    };
    let header = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Split a checkpoint file into manifest and raw payload, verifying the
/// framing but not the checksum.
pub fn read_manifest_and_payload(path: &Path) -> Result<(Manifest, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!("file too short: {} bytes", bytes.len()),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(MAGIC),
                String::from_utf8_lossy(&bytes[..8])
            ),
        });
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: "truncated header".into(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!("bad version: expected {VERSION}, found {}", manifest.version),
        });
    }
    let payload = bytes[12 + header_len..].to_vec();
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!(
                "payload length {} does not match manifest total {expected}",
                payload.len()
            ),
        });
    }
    Ok((manifest, payload))
}

/// Decode the payload into named f64 buffers in manifest order.
pub fn decode_payload(manifest: &Manifest, payload: &[u8]) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = [
                payload[offset],
                payload[offset + 1],
                payload[offset + 2],
                payload[offset + 3],
            ];
            values.push(f32::from_le_bytes(raw) as f64);
            offset += 4;
        }
        out.insert(entry.name.clone(), values);
    }
    out
}

/// BN-node paths under `prefix` that the manifest marks as wrapped.
fn wrapped_paths(manifest: &Manifest, prefix: &str) -> Vec<String> {
    manifest
        .tensors
        .iter()
        .filter(|t| t.tag == "abri.alpha" && t.name.starts_with(prefix))
        .map(|t| {
            t.name[prefix.len()..]
                .strip_suffix(".alpha")
                .expect("alpha tensor name")
                .to_string()
        })
        .collect()
}

fn fill_model(
    path: &Path,
    mut values: BTreeMap<String, Vec<f64>>,
    visit: impl FnOnce(&mut dyn FnMut(String, &mut [f64])),
) -> Result<()> {
    let mut missing = Vec::new();
    let mut filler = |name: String, slot: &mut [f64]| match values.remove(&name) {
        Some(v) if v.len() == slot.len() => slot.copy_from_slice(&v),
        Some(v) => missing.push(format!("{name}: size {} vs {}", v.len(), slot.len())),
        None => missing.push(format!("{name}: absent")),
    };
    visit(&mut filler);
    if !missing.is_empty() {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!("tensor mismatches: {}", missing.join("; ")),
        });
    }
    if !values.is_empty() {
        let extra: Vec<&String> = values.keys().collect();
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!("unused tensors in file: {extra:?}"),
        });
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let (manifest, payload) = read_manifest_and_payload(path)?;
    let checksum = sha256_hex(&payload);
    if checksum != manifest.checksum {
        return Err(Error::Checkpoint {
            path: path.into(),
            detail: format!(
                "payload checksum mismatch: manifest {}, computed {checksum}",
                manifest.checksum
            ),
        });
    }
    let values = decode_payload(&manifest, &payload);
    match &manifest.kind {
        CheckpointKind::Unimodal { config, modality } => {
            let mut model = UniModalModel::init(config, 0, modality.rng_tag())?;
            model
                .encoder
                .wrap_named_bn(&wrapped_paths(&manifest, "encoder."), 0.0)?;
            fill_model(path, values, |f| model.visit_tensors_mut(f))?;
            model.encoder.apply_bn_meta("encoder.", &manifest.bn_meta);
            Ok(ModelCheckpoint::Unimodal {
                model,
                modality: *modality,
            })
        }
        CheckpointKind::Multimodal { config_a, config_v } => {
            let enc_a = Encoder::init(config_a, 0, Modality::A.rng_tag())?;
            let enc_v = Encoder::init(config_v, 0, Modality::V.rng_tag())?;
            let mut model = MultiModalModel::assemble(enc_a, enc_v, config_a.n_classes, 0)?;
            model
                .encoder_a
                .wrap_named_bn(&wrapped_paths(&manifest, "enc_a."), 0.0)?;
            model
                .encoder_v
                .wrap_named_bn(&wrapped_paths(&manifest, "enc_v."), 0.0)?;
            fill_model(path, values, |f| model.visit_tensors_mut(f))?;
            model.encoder_a.apply_bn_meta("enc_a.", &manifest.bn_meta);
            model.encoder_v.apply_bn_meta("enc_v.", &manifest.bn_meta);
            Ok(ModelCheckpoint::Multimodal { model })
        }
    }
}

/// Digest of an encoder's tensors (name, shape, f64 bytes); cheap way to
/// assert a training step or probe did not touch a frozen encoder.
pub fn encoder_digest(encoder: &Encoder) -> String {
    let mut hasher = Sha256::new();
    encoder.visit_tensors("", &mut |name, _tag, shape, data| {
        hasher.update(name.as_bytes());
        for d in shape {
            hasher.update(d.to_le_bytes());
        }
        for &v in data {
            hasher.update(v.to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tag;

    fn small_model() -> UniModalModel {
        let cfg = ModelConfig {
            input_shape: [1, 8, 8],
            channels: vec![2, 3],
            residual: false,
            n_classes: 4,
        };
        UniModalModel::init(&cfg, 42, tag::MODALITY_A).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let model = small_model();
        let ckpt = ModelCheckpoint::Unimodal {
            model,
            modality: Modality::A,
        };
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn wrapped_layers_roundtrip_with_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut model = small_model();
        model.encoder.wrap_all_bn(0.5).unwrap();
        // make the wrapped layers distinctive
        if let crate::model::BnNode::Wrapped(a) = &mut model.encoder.blocks[0].bn1 {
            a.alpha = vec![0.25, 0.75];
            a.bn_ori.gamma = vec![3.0, -2.0];
            a.bn_ori.eps = 7e-4;
        }
        save_checkpoint(
            &ModelCheckpoint::Unimodal {
                model: model.clone(),
                modality: Modality::V,
            },
            &path,
        )
        .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let ModelCheckpoint::Unimodal { model: back, modality } = loaded else {
            panic!("kind changed");
        };
        assert_eq!(modality, Modality::V);
        let crate::model::BnNode::Wrapped(a) = &back.encoder.blocks[0].bn1 else {
            panic!("wrapping lost");
        };
        assert_eq!(a.alpha, vec![0.25, 0.75]);
        assert_eq!(a.bn_ori.gamma, vec![3.0, -2.0]);
        assert_eq!(a.bn_ori.eps, 7e-4);
    }

    #[test]
    fn corrupted_payload_is_caught_by_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ckpt = ModelCheckpoint::Unimodal {
            model: small_model(),
            modality: Modality::A,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();

        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        // the corruption perturbed exactly one decoded entry
        let (manifest, payload) = read_manifest_and_payload(&path).unwrap();
        let decoded = decode_payload(&manifest, &payload);
        let (clean_entries, clean_payload) = collect_tensors(&ckpt);
        let clean = decode_payload(
            &Manifest {
                version: VERSION,
                kind: manifest.kind.clone(),
                tensors: clean_entries,
                bn_meta: Default::default(),
                checksum: String::new(),
            },
            &clean_payload,
        );
        let mut diffs = 0;
        for (name, vals) in &decoded {
            for (a, b) in vals.iter().zip(clean[name].iter()) {
                if a.to_bits() != b.to_bits() {
                    diffs += 1;
                }
            }
        }
        assert_eq!(diffs, 1);
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ckpt = ModelCheckpoint::Unimodal {
            model: small_model(),
            modality: Modality::A,
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("length"), "{err}");
    }

    #[test]
    fn bad_magic_reports_found_vs_expected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        fs::write(&path, b"NOTMAGIC____________").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ABRICKPT") && msg.contains("NOTMAGI"), "{msg}");
    }

    #[test]
    fn multimodal_roundtrip() {
        let cfg = ModelConfig {
            input_shape: [1, 8, 8],
            channels: vec![2],
            residual: true,
            n_classes: 3,
        };
        let enc_a = Encoder::init(&cfg, 1, tag::MODALITY_A).unwrap();
        let enc_v = Encoder::init(&cfg, 2, tag::MODALITY_V).unwrap();
        let model = MultiModalModel::assemble(enc_a, enc_v, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mm.ckpt");
        save_checkpoint(&ModelCheckpoint::Multimodal { model: model.clone() }, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let ModelCheckpoint::Multimodal { model: loaded } = back else {
            panic!("kind changed");
        };
        // f32 narrowing applies on both sides of the comparison
        let mut a = Vec::new();
        model.visit_tensors(&mut |_, _, _, d| a.extend(d.iter().map(|&v| v as f32)));
        let mut b = Vec::new();
        loaded.visit_tensors(&mut |_, _, _, d| b.extend(d.iter().map(|&v| v as f32)));
        assert_eq!(a, b);
    }

    #[test]
    fn digest_tracks_parameter_changes() {
        let model = small_model();
        let d1 = encoder_digest(&model.encoder);
        let mut model2 = model.clone();
        let d2 = encoder_digest(&model2.encoder);
        assert_eq!(d1, d2);
        model2.encoder.blocks[0].conv1.weight.data_mut()[0] += 1e-9;
        assert_ne!(d1, encoder_digest(&model2.encoder));
    }
}
