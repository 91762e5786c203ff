//! Binary checkpoint format.
//!
//! ```text
//! "CKGE"            4 bytes magic
//! version           u32 LE
//! kind code         u32 LE
//! dim               u32 LE
//! |E|, |R|          u64 LE each
//! entity table      |E| * entity_width f64 LE
//! relation table    |R| * relation_width f64 LE
//! metadata length   u64 LE
//! metadata          UTF-8 JSON (dictionary, training config, final loss)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::Dictionary;
use crate::models::{ModelKind, ModelParams};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"CKGE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub train_config: Option<TrainConfig>,
    pub final_loss: Option<f64>,
}

impl Metadata {
    pub fn new(dict: &Dictionary, train_config: Option<TrainConfig>, final_loss: Option<f64>) -> Self {
        Self {
            entities: dict.entities.names().to_vec(),
            relations: dict.relations.names().to_vec(),
            train_config,
            final_loss,
        }
    }

    pub fn dictionary(&self) -> Result<Dictionary> {
        Dictionary::from_names(self.entities.clone(), self.relations.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub meta: Metadata,
}

pub fn encode(model: &ModelParams, meta: &Metadata) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(32 + 8 * (model.entity.len() + model.relation.len()) + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.kind.code().to_le_bytes());
    let dim = u32::try_from(model.dim).map_err(|_| Error::InvalidModel("dim exceeds u32".into()))?;
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(model.num_entities as u64).to_le_bytes());
    out.extend_from_slice(&(model.num_relations as u64).to_le_bytes());
    for v in model.entity.iter().chain(&model.relation) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::CheckpointTruncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::CheckpointTruncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or(Error::CheckpointTruncated)?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let code = r.u32()?;
    let kind = ModelKind::from_code(code).ok_or_else(|| Error::CheckpointCorrupt(format!("unknown model kind code {code}")))?;
    let dim = r.u32()? as usize;
    let to_usize = |v: u64| usize::try_from(v).map_err(|_| Error::CheckpointCorrupt("size overflows usize".into()));
    let num_entities = to_usize(r.u64()?)?;
    let num_relations = to_usize(r.u64()?)?;
    let ne = num_entities
        .checked_mul(kind.entity_width(dim))
        .ok_or_else(|| Error::CheckpointCorrupt("entity table size overflows".into()))?;
    let nr = num_relations
        .checked_mul(kind.relation_width(dim))
        .ok_or_else(|| Error::CheckpointCorrupt("relation table size overflows".into()))?;
    let entity = r.f64s(ne)?;
    let relation = r.f64s(nr)?;
    let json_len = to_usize(r.u64()?)?;
    let json = r.take(json_len)?;
    if r.pos != bytes.len() {
        return Err(Error::CheckpointCorrupt(format!(
            "{} trailing bytes after metadata",
            bytes.len() - r.pos
        )));
    }
    let meta: Metadata = serde_json::from_slice(json)?;
    if meta.entities.len() != num_entities || meta.relations.len() != num_relations {
        return Err(Error::CheckpointCorrupt("dictionary size does not match header".into()));
    }
    Ok(Checkpoint {
        model: ModelParams {
            kind,
            dim,
            num_entities,
            num_relations,
            entity,
            relation,
        },
        meta,
    })
}

pub fn save_checkpoint(model: &ModelParams, meta: &Metadata, path: &Path) -> Result<()> {
    fs::write(path, encode(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_model;

    fn sample() -> (ModelParams, Metadata) {
        let model = init_model(ModelKind::ComplEx, 3, 4, 2, 11).unwrap();
        let dict = Dictionary::from_names(
            (0..4).map(|i| format!("e{i}")).collect(),
            vec!["r".into(), "s".into()],
        )
        .unwrap();
        (model, Metadata::new(&dict, Some(TrainConfig::default()), Some(0.25)))
    }

    #[test]
    fn round_trip_is_bitwise() {
        for kind in ModelKind::ALL {
            let model = init_model(kind, 3, 4, 2, 5).unwrap();
            let (_, meta) = sample();
            let back = decode(&encode(&model, &meta).unwrap()).unwrap();
            assert_eq!(back.model.kind, kind);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back.model.entity), bits(&model.entity));
            assert_eq!(bits(&back.model.relation), bits(&model.relation));
            assert_eq!(back.meta, meta);
        }
    }

    #[test]
    fn file_round_trip() {
        let (model, meta) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckge");
        save_checkpoint(&model, &meta, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.meta.dictionary().unwrap().entities.len(), 4);
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let (model, meta) = sample();
        let bytes = encode(&model, &meta).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::CheckpointTruncated)));
        assert!(matches!(decode(&bytes[..10]), Err(Error::CheckpointTruncated)));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::CheckpointMagic)));

        let mut v99 = bytes.clone();
        v99[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode(&v99), Err(Error::CheckpointVersion(99))));

        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::CheckpointCorrupt(_))));
    }
}
