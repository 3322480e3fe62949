//! Checkpoint directory: `params.bin` (little-endian scalars) plus
//! `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VocabSpec;

use super::float::Float;
use super::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab: VocabSpec,
    pub dtype: String,
    /// `init`, `dynamics`, `policy` or `direct`.
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub seeds: Vec<u64>,
    pub validation: Vec<f64>,
    pub kinds: Vec<String>,
}

impl CheckpointMeta {
    pub fn fresh(config: ModelConfig, dtype: &str, seed: u64) -> Self {
        CheckpointMeta {
            config,
            vocab: VocabSpec::default(),
            dtype: dtype.into(),
            stage: "init".into(),
            epoch: 0,
            step: 0,
            seeds: vec![seed],
            validation: Vec::new(),
            kinds: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelCheckpoint<T: Float> {
    pub model: Model<T>,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint<T: Float>(dir: &Path, ck: &ModelCheckpoint<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(ck.model.params.len() * T::BYTES);
    for &p in &ck.model.params {
        p.write_le(&mut blob);
    }
    let mut meta = ck.meta.clone();
    meta.dtype = T::DTYPE.into();
    meta.config = ck.model.config.clone();
    fs::write(dir.join("params.bin"), blob)?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn read_params<S: Float, T: Float>(blob: &[u8]) -> Vec<T> {
    blob.chunks_exact(S::BYTES).map(|b| T::from_f64(S::read_le(b).to_f64().unwrap()).unwrap()).collect()
}

/// Loads a checkpoint, converting precision if needed. Refuses checkpoints
/// whose vocabulary differs from the tokenizer's.
pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<ModelCheckpoint<T>> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::File(format!("{}: {e}", meta_path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    meta.vocab.check_compatible()?;
    let blob_path = dir.join("params.bin");
    let blob = fs::read(&blob_path).map_err(|e| Error::File(format!("{}: {e}", blob_path.display())))?;
    let params = match meta.dtype.as_str() {
        "f32" => read_params::<f32, T>(&blob),
        "f64" => read_params::<f64, T>(&blob),
        other => return Err(Error::Compatibility(format!("unknown parameter dtype '{other}'"))),
    };
    let model = Model::from_params(meta.config.clone(), params)?;
    Ok(ModelCheckpoint { model, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SeqInput;
    use crate::problems::ProblemKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f64>::init(ModelConfig::tiny(), 1).unwrap();
        let meta = CheckpointMeta::fresh(model.config.clone(), "f64", 1);
        save_checkpoint(dir.path(), &ModelCheckpoint { model: model.clone(), meta }).unwrap();
        let back = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(back.model.params, model.params);
        let r = crate::model::forward::tests::sample_record(ProblemKind::Tsp, 4, 0, 40);
        let s = [SeqInput::from_record(&r, true, true)];
        assert_eq!(model.forward_seqs(&s).unwrap(), back.model.forward_seqs(&s).unwrap());
    }

    #[test]
    fn vocab_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::init(ModelConfig::tiny(), 1).unwrap();
        let mut meta = CheckpointMeta::fresh(model.config.clone(), "f32", 1);
        meta.vocab.pad = 9999;
        save_checkpoint(dir.path(), &ModelCheckpoint { model, meta }).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::Compatibility(_))));
    }
}
