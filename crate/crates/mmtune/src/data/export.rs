//! Dataset directory export: one JSON index plus one raw tensor blob per
//! split, payload in the same little-endian f32 convention as checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MultiModalSample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleIndexEntry {
    pub id: u64,
    pub label: usize,
    /// Byte offset of the modality-A tensor in the split blob.
    pub offset_a: usize,
    pub shape_a: Vec<usize>,
    pub offset_v: usize,
    pub shape_v: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitIndex {
    pub split: String,
    pub dtype: String,
    pub samples: Vec<SampleIndexEntry>,
}

fn append_tensor(blob: &mut Vec<u8>, t: &Tensor) -> usize {
    let offset = blob.len();
    for &v in t.data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    offset
}

fn export_split(dir: &Path, name: &str, samples: &[MultiModalSample]) -> Result<()> {
    let mut blob = Vec::new();
    let mut index = SplitIndex {
        split: name.to_string(),
        dtype: "f32le".to_string(),
        samples: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let offset_a = append_tensor(&mut blob, &s.tensor_a);
        let offset_v = append_tensor(&mut blob, &s.tensor_v);
        index.samples.push(SampleIndexEntry {
            id: s.id,
            label: s.label,
            offset_a,
            shape_a: s.tensor_a.shape().to_vec(),
            offset_v,
            shape_v: s.tensor_v.shape().to_vec(),
        });
    }
    let json_path = dir.join(format!("{name}.json"));
    fs::write(&json_path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&json_path, e))?;
    let blob_path = dir.join(format!("{name}.bin"));
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

/// Write `{train,val,test}.json` and `{train,val,test}.bin` under `dir`.
pub fn export_dataset(dataset: &SyntheticDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    export_split(dir, "train", &dataset.train)?;
    export_split(dir, "val", &dataset.val)?;
    export_split(dir, "test", &dataset.test)?;
    Ok(())
}

/// Read one exported split back into samples (f32-widened values).
pub fn import_split(dir: &Path, name: &str) -> Result<Vec<MultiModalSample>> {
    let json_path = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let index: SplitIndex = serde_json::from_str(&text)?;
    let blob_path = dir.join(format!("{name}.bin"));
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let read_tensor = |offset: usize, shape: &[usize]| -> Result<Tensor> {
        let count: usize = shape.iter().product();
        if offset + count * 4 > blob.len() {
            return Err(Error::Checkpoint {
                path: blob_path.clone(),
                detail: format!("blob too short for tensor at offset {offset}"),
            });
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 4;
            values.push(f32::from_le_bytes([blob[at], blob[at + 1], blob[at + 2], blob[at + 3]]) as f64);
        }
        Tensor::new(shape.to_vec(), values)
    };
    index
        .samples
        .iter()
        .map(|e| {
            Ok(MultiModalSample {
                id: e.id,
                label: e.label,
                tensor_a: read_tensor(e.offset_a, &e.shape_a)?,
                tensor_v: read_tensor(e.offset_v, &e.shape_v)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SplitCounts, SyntheticSpec};

    #[test]
    fn export_import_roundtrip() {
        let spec = SyntheticSpec {
            n_classes: 2,
            samples_per_class: SplitCounts { train: 2, val: 1, test: 1 },
            shape_a: [1, 8, 8],
            shape_v: [1, 8, 8],
            snr_a: 1.0,
            snr_v: 1.0,
            support_a: 2,
            support_v: 2,
            seed: 3,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path()).unwrap();
        let back = import_split(dir.path(), "train").unwrap();
        assert_eq!(back.len(), ds.train.len());
        for (orig, imported) in ds.train.iter().zip(back.iter()) {
            assert_eq!(orig.id, imported.id);
            assert_eq!(orig.label, imported.label);
            for (a, b) in orig.tensor_a.iter().zip(imported.tensor_a.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }
}
