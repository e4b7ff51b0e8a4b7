//! Parameter checkpoints.
//!
//! Layout: the magic `MSKPLAN\0`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the JSON manifest, then each tensor
//! as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MaskPredictor, ModelConfig, ModelError, Weights};
use crate::codec::TemplateSpec;

const MAGIC: &[u8; 8] = b"MSKPLAN\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub model: ModelConfig,
    pub template: TemplateSpec,
    /// Resolved run configuration echoed for provenance.
    pub provenance: String,
    pub tensors: Vec<TensorEntry>,
}

/// A model plus the template it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MaskPredictor<f32>,
    pub template: TemplateSpec,
    pub provenance: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let weights = self.model.weights();
        let mut offset = 0;
        let tensors = weights
            .named()
            .into_iter()
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name,
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                    offset,
                };
                offset += t.len();
                entry
            })
            .collect();
        let manifest = Manifest {
            model: *self.model.config(),
            template: self.template,
            provenance: self.provenance.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in weights.tensors() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, ModelError> {
        let fail = |reason: &str| ModelError::Checkpoint {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(mlen).ok_or_else(|| fail("manifest length"))?;
        if bytes.len() < data_start {
            return Err(fail("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[20..data_start]).map_err(|e| fail(&format!("manifest: {e}")))?;
        manifest.model.validate()?;
        let data = &bytes[data_start..];

        let mut weights = Weights::<f32>::zeros(&manifest.model);
        let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != manifest.tensors.len() {
            return Err(fail("tensor count does not match model config"));
        }
        for ((tensor, name), entry) in weights.tensors_mut().into_iter().zip(&names).zip(&manifest.tensors) {
            if &entry.name != name || entry.shape != tensor.shape || entry.dtype != "f32" {
                return Err(fail(&format!("unexpected tensor entry {}", entry.name)));
            }
            let start = entry.offset * 4;
            let end = start + tensor.len() * 4;
            if end > data.len() {
                return Err(fail("truncated tensor data"));
            }
            for (v, chunk) in tensor.data.iter_mut().zip(data[start..end].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(Self {
            model: MaskPredictor::from_weights(manifest.model, weights)?,
            template: manifest.template,
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Vocabulary;

    fn checkpoint(seed: u64) -> Checkpoint {
        let vocab = Vocabulary::standard();
        let spec = TemplateSpec::parking();
        let cfg = ModelConfig::tiny(vocab.len(), spec.length());
        Checkpoint {
            model: MaskPredictor::new(cfg, seed).unwrap(),
            template: spec,
            provenance: "seed = 3\n".into(),
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let ck = checkpoint(3);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        for (a, b) in ck.model.weights().tensors().iter().zip(back.model.weights().tensors()) {
            let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let ck = checkpoint(5);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = checkpoint(1).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..10], "mem").is_err());
        let n = bytes.len();
        assert!(Checkpoint::from_bytes(&bytes[..n - 4], "mem").is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, "mem").is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/ck.bin")),
            Err(ModelError::Io { .. })
        ));
    }
}
