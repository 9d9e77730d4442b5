//! Checkpoint container: one file holding named parameter tensors (raw
//! little-endian f32), the vocabulary, the label schema, and a JSON header
//! echoing the configs. Saving first rounds the in-memory parameters to f32
//! so that a reloaded model is bit-identical to the one that was saved.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::MultiModel;
use crate::encoder::Vocab;
use crate::normalizer::{NormContext, NormModel};
use crate::params::ParamStore;
use crate::records::System;
use crate::schema::LabelSchema;
use crate::spanmodel::{ModelConfig, SpertModel, TrainConfig};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"RSPANCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("schema: {0}")]
    Schema(#[from] crate::schema::SchemaError),
    #[error("vocab: {0}")]
    Vocab(#[from] crate::encoder::EncoderError),
    #[error("checkpoint/model mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub version: String,
    pub system: System,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub norm_context: Option<NormContext>,
    pub split_seed: u64,
    pub data_digest: String,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub schema: LabelSchema,
    pub vocab: Vocab,
    tensors: Vec<(String, Matrix)>,
}

/// Write the container. Rounds `store` to f32 precision in place first so
/// in-memory inference after a save matches a reload exactly.
pub fn save(
    path: &Path,
    header: &CheckpointHeader,
    schema: &LabelSchema,
    vocab: &Vocab,
    store: &mut ParamStore,
) -> Result<(), CheckpointError> {
    store.round_to_f32();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    let header_json = serde_json::to_vec(header)?;
    write_block(&mut out, &header_json);
    write_block(&mut out, schema.to_config().as_bytes());
    write_block(&mut out, vocab.to_text().as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for entry in store.entries() {
        let name = entry.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(entry.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(entry.value.cols() as u32).to_le_bytes());
        for &v in entry.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn write_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *at + n > bytes.len() {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let read_block = |at: &mut usize| -> Result<Vec<u8>, CheckpointError> {
        let len = u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize;
        Ok(take(at, len)?.to_vec())
    };
    let header: CheckpointHeader = serde_json::from_slice(&read_block(&mut at)?)?;
    let schema = LabelSchema::parse(&String::from_utf8_lossy(&read_block(&mut at)?))?;
    let vocab = Vocab::from_text(&String::from_utf8_lossy(&read_block(&mut at)?))?;
    let n_tensors = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8_lossy(take(&mut at, name_len)?).to_string();
        let rows = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let raw = take(&mut at, rows * cols * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint {
        header,
        schema,
        vocab,
        tensors,
    })
}

impl Checkpoint {
    /// Copy saved tensors into a freshly registered store, by name, checking
    /// shapes.
    fn fill(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        if store.len() != self.tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "expected {} tensors, checkpoint has {}",
                store.len(),
                self.tensors.len()
            )));
        }
        for (name, value) in &self.tensors {
            let id = store
                .by_name(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unexpected tensor `{name}`")))?;
            if store.value(id).shape() != value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor `{name}` shape {:?} != saved {:?}",
                    store.value(id).shape(),
                    value.shape()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn restore_spert(&self) -> Result<(ParamStore, SpertModel), CheckpointError> {
        if self.header.system != System::Spert {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint is for {}, not spert",
                self.header.system.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let model = SpertModel::new(
            &mut store,
            self.vocab.len(),
            &self.schema,
            &self.header.model_config,
            self.header.train_config.max_span_width,
            &mut rng,
        );
        self.fill(&mut store)?;
        Ok((store, model))
    }

    pub fn restore_multi(&self) -> Result<(ParamStore, MultiModel), CheckpointError> {
        if self.header.system != System::BertMulti {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint is for {}, not bert-multi",
                self.header.system.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let model = MultiModel::new(
            &mut store,
            self.vocab.len(),
            &self.schema,
            &self.header.model_config,
            &mut rng,
        );
        self.fill(&mut store)?;
        Ok((store, model))
    }

    pub fn restore_norm(&self) -> Result<(ParamStore, NormModel), CheckpointError> {
        let context = match (self.header.system, self.header.norm_context) {
            (System::NormPhrase, _) => NormContext::Phrase,
            (System::NormSentence, _) => NormContext::Sentence,
            (other, _) => {
                return Err(CheckpointError::Mismatch(format!(
                    "checkpoint is for {}, not a normalization mode",
                    other.name()
                )))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let model = NormModel::new(
            &mut store,
            self.vocab.len(),
            &self.schema,
            &self.header.model_config,
            self.header.train_config.max_span_width,
            context,
            &mut rng,
        );
        self.fill(&mut store)?;
        Ok((store, model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::encoder::build_vocab;
    use crate::spanmodel::predict_spert;

    #[test]
    fn save_load_round_trips_params_exactly() {
        let schema = LabelSchema::full();
        let docs = vec![Document::from_text("a", "mass in the lung.")];
        let vocab = build_vocab(&docs, 300, &schema).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let model_cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            width_dim: 4,
            vocab_max: 300,
        };
        let cfg = TrainConfig::spert(9);
        let model = SpertModel::new(&mut store, vocab.len(), &schema, &model_cfg, 10, &mut rng);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsck");
        let header = CheckpointHeader {
            version: crate::VERSION.to_string(),
            system: System::Spert,
            train_config: cfg.clone(),
            model_config: model_cfg,
            norm_context: None,
            split_seed: 13,
            data_digest: "test".into(),
        };
        save(&path, &header, &schema, &vocab, &mut store).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.header, header);
        assert_eq!(loaded.schema, schema);
        assert_eq!(loaded.vocab, vocab);
        let (store2, model2) = loaded.restore_spert().unwrap();

        // value-exact after the save-time rounding
        for entry in store.entries() {
            let id2 = store2.by_name(&entry.name).unwrap();
            assert_eq!(&entry.value, store2.value(id2), "{}", entry.name);
        }
        // predictions identical between the rounded in-memory model and the
        // reloaded one
        let doc = Document::from_text("d", "mass in the lung. no mass in the rib.");
        let a = predict_spert(&store, &model, &vocab, &cfg, &doc).0;
        let b = predict_spert(&store2, &model2, &loaded.vocab, &cfg, &doc).0;
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_system_is_rejected() {
        let schema = LabelSchema::full();
        let docs = vec![Document::from_text("a", "mass.")];
        let vocab = build_vocab(&docs, 300, &schema).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let model_cfg = ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            width_dim: 4,
            vocab_max: 300,
        };
        SpertModel::new(&mut store, vocab.len(), &schema, &model_cfg, 10, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsck");
        let header = CheckpointHeader {
            version: crate::VERSION.to_string(),
            system: System::Spert,
            train_config: TrainConfig::spert(1),
            model_config: model_cfg,
            norm_context: None,
            split_seed: 13,
            data_digest: "test".into(),
        };
        save(&path, &header, &schema, &vocab, &mut store).unwrap();
        let loaded = load(&path).unwrap();
        assert!(loaded.restore_multi().is_err());
        assert!(loaded.restore_norm().is_err());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsck");
        fs::write(&path, b"RSPANCK1\x10\x00\x00\x00oops").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Corrupt(_))));
        fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }
}
