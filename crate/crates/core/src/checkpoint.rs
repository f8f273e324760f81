//! Binary checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "GEOREFCK"  version  header_len  header (JSON, UTF-8)
//! param_count  { name_len name rank dims[rank] f32[prod(dims)] } * param_count
//! ```
//!
//! Records are sorted by name. Files are written to a temporary sibling and renamed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_backbone, is_refiner, Ablation, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"GEOREFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Refiner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEcho {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub steps: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub refiner: Option<Ablation>,
    pub train: TrainConfig,
    pub optimizer: OptimizerEcho,
    /// Hash of the resolved run configuration that produced the file.
    pub config_hash: String,
    /// Content hash of the training dataset.
    pub dataset_hash: String,
    /// Scene hashes of the objects seen during training.
    pub train_scenes: Vec<String>,
    pub backbone_hash: String,
    pub refiner_hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_model(
        model: &Model,
        stage: Stage,
        steps: usize,
        train: &TrainConfig,
        config_hash: &str,
        dataset_hash: &str,
        train_scenes: Vec<String>,
    ) -> Self {
        let mut params = model.params.clone();
        params.round_to_f32();
        let header = CheckpointHeader {
            stage,
            steps,
            seed: train.seed,
            model: model.config.clone(),
            refiner: model.refiner,
            train: train.clone(),
            optimizer: OptimizerEcho { beta1: train.beta1, beta2: train.beta2, weight_decay: train.weight_decay },
            config_hash: config_hash.into(),
            dataset_hash: dataset_hash.into(),
            train_scenes,
            backbone_hash: params.hash(is_backbone),
            refiner_hash: params.hash(is_refiner),
        };
        Self { header, params }
    }

    pub fn model(&self) -> Model {
        Model { config: self.header.model.clone(), params: self.params.clone(), refiner: self.header.refiner }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 64 + 4 * self.params.num_scalars(|_| true));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.params.encode_records(|_| true));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hl = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hl)?)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nl)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(4 * n)?;
            let data = raw.chunks(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            params.insert(name, Tensor::new(dims, data));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameter records".into()));
        }
        if params.hash(is_backbone) != header.backbone_hash || params.hash(is_refiner) != header.refiner_hash {
            return Err(Error::Checkpoint("parameter hash does not match header".into()));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let cfg = ModelConfig { dim: 8, heads: 1, encoder_depth: 1, plane_res: 4, fusion_hidden: 8, ..Default::default() };
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn round_trip_preserves_params_and_header() {
        let m = tiny();
        let ck = Checkpoint::from_model(&m, Stage::Baseline, 7, &TrainConfig::default(), "c", "d", vec!["obj_0000".into()]);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.params, ck.params);
        assert_eq!(back.header.optimizer, OptimizerEcho { beta1: 0.9, beta2: 0.95, weight_decay: 0.01 });
        assert_eq!(&ck.encode().unwrap()[..8], b"GEOREFCK");
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::from_model(&tiny(), Stage::Baseline, 0, &TrainConfig::default(), "", "", vec![]);
        let bytes = ck.encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut flipped = bytes;
        let n = flipped.len();
        flipped[n - 2] ^= 0x40;
        assert!(Checkpoint::decode(&flipped).is_err());
    }
}
