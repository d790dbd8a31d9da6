//! Model checkpoint container.
//!
//! Layout: the 8-byte magic `SBCKPT01`, the manifest length as a little-endian
//! `u64`, the manifest as JSON, then every parameter's values as little-endian
//! `f32` in manifest order. Each manifest entry records its tensor's name,
//! shape, and the element offset and length within the trailing buffer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use synthbalance_tensor::{ParamSet, Tensor};

use crate::classifier::{ClfTrainConfig, CnnArch, CnnModel};
use crate::error::{Error, Result};
use crate::generator::{CvaeArch, CvaeModel, GenTrainConfig};

pub const MAGIC: &[u8; 8] = b"SBCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cvae,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub architecture: Value,
    pub config: Value,
    pub seed: u64,
    pub epoch: usize,
    /// Class the model was trained on, for per-class generators.
    pub class_name: Option<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet,
}

fn entries(params: &ParamSet) -> Vec<ParamEntry> {
    let mut offset = 0;
    params
        .iter()
        .map(|(name, t)| {
            let e = ParamEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
                offset,
                length: t.len(),
            };
            offset += t.len();
            e
        })
        .collect()
}

impl Checkpoint {
    fn build(
        kind: ModelKind,
        architecture: Value,
        config: Value,
        seed: u64,
        epoch: usize,
        class_name: Option<String>,
        params: ParamSet,
    ) -> Self {
        Self {
            manifest: Manifest {
                kind,
                architecture,
                config,
                seed,
                epoch,
                class_name,
                params: entries(&params),
            },
            params,
        }
    }

    pub fn from_cvae(
        model: &CvaeModel,
        cfg: &GenTrainConfig,
        epoch: usize,
        class_name: Option<String>,
    ) -> Result<Self> {
        Ok(Self::build(
            ModelKind::Cvae,
            serde_json::to_value(model.arch())?,
            serde_json::to_value(cfg)?,
            cfg.seed,
            epoch,
            class_name,
            model.params().clone(),
        ))
    }

    pub fn from_cnn(model: &CnnModel, cfg: &ClfTrainConfig, epoch: usize) -> Result<Self> {
        Ok(Self::build(
            ModelKind::Cnn,
            serde_json::to_value(model.arch())?,
            serde_json::to_value(cfg)?,
            cfg.seed,
            epoch,
            None,
            model.params().clone(),
        ))
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    pub fn to_cvae(&self) -> Result<CvaeModel> {
        self.expect(ModelKind::Cvae)?;
        let arch: CvaeArch = serde_json::from_value(self.manifest.architecture.clone())?;
        CvaeModel::from_params(arch, self.params.clone())
    }

    pub fn to_cnn(&self) -> Result<CnnModel> {
        self.expect(ModelKind::Cnn)?;
        let arch: CnnArch = serde_json::from_value(self.manifest.architecture.clone())?;
        CnnModel::from_params(arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.manifest.params != entries(&self.params) {
            return Err(Error::Checkpoint(
                "manifest entries do not describe the parameters".into(),
            ));
        }
        let manifest = serde_json::to_vec(&self.manifest)?;
        let floats = self.params.element_count();
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mlen = usize::try_from(mlen).map_err(|_| bad("manifest length overflows"))?;
        let body = bytes
            .get(16..)
            .filter(|b| b.len() >= mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        let data = &body[mlen..];
        let mut expected = 0usize;
        let mut params = ParamSet::new();
        for e in &manifest.params {
            if e.offset != expected || e.shape.iter().product::<usize>() != e.length {
                return Err(bad(&format!("inconsistent entry for {}", e.name)));
            }
            let raw = data
                .get(4 * e.offset..4 * (e.offset + e.length))
                .ok_or_else(|| bad(&format!("truncated data for {}", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(e.name.clone(), Tensor::from_vec(&e.shape, values)?)?;
            expected += e.length;
        }
        if data.len() != 4 * expected {
            return Err(bad("trailing bytes after parameter data"));
        }
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::build_cnn;
    use crate::generator::build_cvae;

    #[test]
    fn byte_exact_round_trip() {
        let m = build_cvae(8, 3, 4).unwrap();
        let ck = Checkpoint::from_cvae(&m, &GenTrainConfig::default(), 7, Some("a".into())).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_cvae().unwrap(), m);
        assert!(back.to_cnn().is_err());
    }

    #[test]
    fn cnn_round_trip() {
        let m = build_cnn(8, 2, 1).unwrap();
        let ck = Checkpoint::from_cnn(&m, &ClfTrainConfig::default(), 0).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_cnn().unwrap(), m);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = build_cnn(8, 2, 1).unwrap();
        let bytes = Checkpoint::from_cnn(&m, &ClfTrainConfig::default(), 0)
            .unwrap()
            .to_bytes()
            .unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.extend([0, 0, 0, 0]);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
